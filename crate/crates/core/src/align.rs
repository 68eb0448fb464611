//! Aligning traces to execution paths through the call-site graph.
//!
//! Each mapped span opens an invocation of its function. The span's children
//! (with unmapped spans made transparent, their own children flattened into
//! the same sequence) are aligned against the callee slots of that
//! function's body by a shortest-path search over
//! `(sequence position, body position)` states:
//!
//! * match a span to the slot calling its function: the cost of the span's
//!   own subtree alignment,
//! * skip a slot: 1,
//! * insert a span: 1, plus its own subtree cost if it is mapped.
//!
//! Costs are compared as `(cost, insertions)` so that among equally cheap
//! alignments the one with fewer insertions wins. Remaining ties are broken
//! greedily: match before insert before skip, then the smallest next block id.

use std::collections::{BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::fmt::Write as _;
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use lru::LruCache;
use thiserror::Error;

use crate::cscfg::{AlignmentInsert, BlockId, Cscfg, FunctionBody, FunctionRef};
use crate::mapping::{Resolution, SpanFunctionMap};
use crate::model::{SpanId, Trace};

pub const DEFAULT_CACHE_CAPACITY: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AlignError {
    #[error("trace {trace_id}: no path, first unmatchable span {span}")]
    NoPath { trace_id: String, span: SpanId },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum StepKind {
    /// Invocation of the entry function.
    Root { function: FunctionRef },
    /// One callee slot of a block. `visit` counts earlier visits of the same
    /// block within the invocation.
    Call { block: BlockId, slot: usize, visit: u32 },
    /// A span the graph does not explain.
    Inserted,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathStep {
    pub kind: StepKind,
    /// Span explained by this step; `None` for a skipped slot.
    pub span: Option<SpanId>,
    pub invocation: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Invocation {
    /// `None` for the top-level context that holds the root step.
    pub function: Option<FunctionRef>,
    pub caller_step: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecutionPath {
    pub trace_id: String,
    pub steps: Vec<PathStep>,
    pub invocations: Vec<Invocation>,
    pub cost: u64,
    pub insertions: u64,
    pub skips: u64,
}

impl ExecutionPath {
    /// The alignment-insert records this path contributes to the graph.
    pub fn alignment_inserts(&self, trace: &Trace) -> Vec<AlignmentInsert> {
        let mut out = Vec::new();
        let mut last_block: HashMap<usize, BlockId> = HashMap::new();
        for step in &self.steps {
            match &step.kind {
                StepKind::Call { block, .. } => {
                    last_block.insert(step.invocation, block.clone());
                }
                StepKind::Inserted => {
                    let span = step.span.as_ref().and_then(|id| trace.get(id));
                    if let Some(span) = span {
                        out.push(AlignmentInsert {
                            owner: self.invocations[step.invocation].function.clone(),
                            after_block: last_block.get(&step.invocation).cloned(),
                            service: span.service.clone(),
                            operation: span.operation.clone(),
                        });
                    }
                }
                StepKind::Root { .. } => {}
            }
        }
        out
    }

    /// Step-by-step text report.
    pub fn render(&self, trace: &Trace) -> String {
        let mut depth = vec![0usize; self.invocations.len()];
        for (i, inv) in self.invocations.iter().enumerate() {
            if let Some(c) = inv.caller_step {
                depth[i] = depth[self.steps[c].invocation] + 1;
            }
        }
        let mut out = format!(
            "trace {} cost={} insertions={} skips={}\n",
            self.trace_id, self.cost, self.insertions, self.skips
        );
        for (i, step) in self.steps.iter().enumerate() {
            let pad = "  ".repeat(depth[step.invocation]);
            let span = match &step.span {
                Some(id) => {
                    let op = trace.get(id).map_or("?", |s| s.operation.as_str());
                    format!("{id} {op}")
                }
                None => "-".to_string(),
            };
            let what = match &step.kind {
                StepKind::Root { function } => format!("root  {function}"),
                StepKind::Call { block, slot, visit } if step.span.is_some() => {
                    format!("match {block}[{slot}] visit {visit}")
                }
                StepKind::Call { block, slot, visit } => format!("skip  {block}[{slot}] visit {visit}"),
                StepKind::Inserted => "insert".to_string(),
            };
            let _ = writeln!(out, "{i:4} {pad}{what}  {span}");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum SigItem {
    Mapped(FunctionRef),
    Unmapped,
}

/// Canonical shape of a trace: preorder `(depth, resolution)` pairs.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PathCacheKey(Vec<(u32, SigItem)>);

impl PathCacheKey {
    pub fn of(trace: &Trace, map: &SpanFunctionMap) -> Self {
        let mut depth = vec![0u32; trace.len()];
        let mut items = Vec::with_capacity(trace.len());
        for i in trace.preorder() {
            for &c in trace.child_indices(i) {
                depth[c] = depth[i] + 1;
            }
            let item = match map.resolve(&trace.spans()[i]) {
                Resolution::Resolved(f) => SigItem::Mapped(f),
                Resolution::Unmapped(_) => SigItem::Unmapped,
            };
            items.push((depth[i], item));
        }
        PathCacheKey(items)
    }
}

/// An alignment with spans referenced by preorder position.
#[derive(Debug)]
struct Template {
    steps: Vec<(StepKind, Option<u32>, usize)>,
    invocations: Vec<Invocation>,
    cost: u64,
    insertions: u64,
    skips: u64,
}

/// Bounded LRU cache from trace shape to alignment.
pub struct PathCache {
    inner: Option<Mutex<LruCache<PathCacheKey, Arc<Template>>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl std::fmt::Debug for PathCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PathCache")
            .field("hits", &self.hits())
            .field("misses", &self.misses())
            .finish()
    }
}

impl Default for PathCache {
    fn default() -> Self {
        Self::new(DEFAULT_CACHE_CAPACITY)
    }
}

impl PathCache {
    /// A capacity of zero disables caching.
    pub fn new(capacity: usize) -> Self {
        PathCache {
            inner: NonZeroUsize::new(capacity).map(|c| Mutex::new(LruCache::new(c))),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn disabled() -> Self {
        Self::new(0)
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn contains(&self, key: &PathCacheKey) -> bool {
        self.inner
            .as_ref()
            .is_some_and(|m| m.lock().expect("path cache poisoned").contains(key))
    }

    fn get(&self, key: &PathCacheKey) -> Option<Arc<Template>> {
        let hit = self
            .inner
            .as_ref()
            .and_then(|m| m.lock().expect("path cache poisoned").get(key).cloned());
        let counter = if hit.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::Relaxed);
        hit
    }

    fn put(&self, key: PathCacheKey, value: Arc<Template>) {
        if let Some(m) = &self.inner {
            m.lock().expect("path cache poisoned").put(key, value);
        }
    }
}

/// Minimum-cost alignment of `trace`, served from `cache` when its shape was seen before.
pub fn align(
    graph: &Cscfg,
    trace: &Trace,
    map: &SpanFunctionMap,
    cache: &PathCache,
) -> Result<ExecutionPath, AlignError> {
    let order = trace.preorder();
    let key = PathCacheKey::of(trace, map);
    let template = match cache.get(&key) {
        Some(t) => t,
        None => {
            let t = Arc::new(compute(graph, trace, map, &order)?);
            cache.put(key, Arc::clone(&t));
            t
        }
    };
    let spans = trace.spans();
    Ok(ExecutionPath {
        trace_id: trace.trace_id().to_string(),
        steps: template
            .steps
            .iter()
            .map(|(kind, pos, inv)| PathStep {
                kind: kind.clone(),
                span: pos.map(|p| spans[order[p as usize]].span_id.clone()),
                invocation: *inv,
            })
            .collect(),
        invocations: template.invocations.clone(),
        cost: template.cost,
        insertions: template.insertions,
        skips: template.skips,
    })
}

pub fn align_uncached(graph: &Cscfg, trace: &Trace, map: &SpanFunctionMap) -> Result<ExecutionPath, AlignError> {
    align(graph, trace, map, &PathCache::disabled())
}

// ---------------------------------------------------------------------------

type Cost = (u64, u64);
const INF: Cost = (u64::MAX, u64::MAX);

fn add(a: Cost, b: Cost) -> Cost {
    if a == INF || b == INF {
        INF
    } else {
        (a.0 + b.0, a.1 + b.1)
    }
}

#[derive(Clone, Copy, Debug)]
enum Item {
    /// A mapped span; its subtree alignment is looked up by span index.
    Mapped(usize),
    Unmapped(usize),
}

#[derive(Clone, Debug)]
enum Action {
    Match { block: usize, slot: usize, item: usize },
    Skip { block: usize, slot: usize },
    Insert { item: usize },
    Enter { block: usize },
}

#[derive(Debug)]
struct Local {
    cost: Cost,
    skips: u64,
    items: Vec<Item>,
    actions: Vec<Action>,
    body: Option<FunctionRef>,
}

struct Ctx<'a> {
    graph: &'a Cscfg,
    trace: &'a Trace,
    resolved: Vec<Option<FunctionRef>>,
    locals: HashMap<usize, Local>,
}

impl Ctx<'_> {
    fn flatten(&self, children: &[usize], out: &mut Vec<Item>) {
        for &c in children {
            if self.resolved[c].is_some() {
                out.push(Item::Mapped(c));
            } else {
                out.push(Item::Unmapped(c));
                self.flatten(self.trace.child_indices(c), out);
            }
        }
    }

    fn item_insert_cost(&self, item: Item) -> Cost {
        match item {
            Item::Mapped(s) => add((1, 1), self.locals[&s].cost),
            Item::Unmapped(_) => (1, 1),
        }
    }

    fn item_match_cost(&self, item: Item, callee: &FunctionRef) -> Option<Cost> {
        match item {
            Item::Mapped(s) if self.resolved[s].as_ref() == Some(callee) => Some(self.locals[&s].cost),
            _ => None,
        }
    }

    /// Aligns the children of mapped span `s` against its function body.
    fn solve(&mut self, s: usize) {
        let mut items = Vec::new();
        self.flatten(self.trace.child_indices(s), &mut items);
        let func = self.resolved[s].clone().expect("mapped span");
        let body = self.graph.function(&func).filter(|b| !b.blocks.is_empty());
        let local = match body {
            Some(body) => self.search(body, items),
            None => {
                let cost = items.iter().fold((0, 0), |acc, &it| add(acc, self.item_insert_cost(it)));
                let actions = (0..items.len()).map(|item| Action::Insert { item }).collect();
                Local {
                    cost,
                    skips: 0,
                    items,
                    actions,
                    body: None,
                }
            }
        };
        self.locals.insert(s, local);
    }

    fn search(&self, body: &FunctionBody, items: Vec<Item>) -> Local {
        let lay = Layout::new(self.graph, body);
        let m = items.len();
        let p = lay.positions;
        // cost-to-go, layer by layer from the end
        let mut ctg = vec![vec![INF; p]; m + 1];
        for i in (0..=m).rev() {
            let mut dist = vec![INF; p];
            if i == m {
                dist[EXIT] = (0, 0);
            } else {
                let ins = self.item_insert_cost(items[i]);
                for (pos, d) in dist.iter_mut().enumerate() {
                    *d = add(ins, ctg[i + 1][pos]);
                }
                for (j, blk) in lay.callees.iter().enumerate() {
                    for (k, callee) in blk.iter().enumerate() {
                        if let Some(c) = self.item_match_cost(items[i], callee) {
                            let here = lay.slot(j, k);
                            let v = add(c, ctg[i + 1][lay.slot(j, k + 1)]);
                            if v < dist[here] {
                                dist[here] = v;
                            }
                        }
                    }
                }
            }
            // backward Dijkstra over within-layer edges
            let mut heap: BinaryHeap<Reverse<(Cost, usize)>> = dist
                .iter()
                .enumerate()
                .filter(|(_, d)| **d != INF)
                .map(|(v, d)| Reverse((*d, v)))
                .collect();
            let mut done = vec![false; p];
            while let Some(Reverse((d, v))) = heap.pop() {
                if done[v] || d != dist[v] {
                    continue;
                }
                done[v] = true;
                for &(u, w) in &lay.pred[v] {
                    let nd = add(w, d);
                    if nd < dist[u] {
                        dist[u] = nd;
                        heap.push(Reverse((nd, u)));
                    }
                }
            }
            ctg[i] = dist;
        }

        // forward walk along optimal transitions
        let mut actions = Vec::new();
        let mut skips = 0;
        let (mut i, mut pos) = (0usize, ENTRY);
        while !(i == m && pos == EXIT) {
            let here = ctg[i][pos];
            debug_assert!(here != INF, "exit is always reachable");
            let ins = (i < m).then(|| add(self.item_insert_cost(items[i]), ctg[i + 1][pos]));
            if let Some((j, k)) = lay.slot_of(pos) {
                let callee = &lay.callees[j][k];
                if i < m {
                    if let Some(c) = self.item_match_cost(items[i], callee) {
                        if add(c, ctg[i + 1][pos + 1]) == here {
                            actions.push(Action::Match { block: j, slot: k, item: i });
                            i += 1;
                            pos += 1;
                            continue;
                        }
                    }
                }
                if ins == Some(here) {
                    actions.push(Action::Insert { item: i });
                    i += 1;
                    continue;
                }
                actions.push(Action::Skip { block: j, slot: k });
                skips += 1;
                pos += 1;
                debug_assert_eq!(add((1, 0), ctg[i][pos]), here);
                continue;
            }
            if ins == Some(here) {
                actions.push(Action::Insert { item: i });
                i += 1;
                continue;
            }
            let next = lay.succ[pos]
                .iter()
                .copied()
                .find(|&(v, w)| add(w, ctg[i][v]) == here)
                .map(|(v, _)| v)
                .expect("an optimal transition exists");
            if let Some((j, 0)) = lay.slot_of(next) {
                actions.push(Action::Enter { block: j });
            }
            pos = next;
        }
        Local {
            cost: ctg[0][ENTRY],
            skips,
            items,
            actions,
            body: Some(body.function.clone()),
        }
    }
}

const ENTRY: usize = 0;
const EXIT: usize = 1;

/// Position numbering for one body: `ENTRY`, `EXIT`, then `(block, slot)`
/// for every slot including the one past the last callee.
struct Layout {
    callees: Vec<Vec<FunctionRef>>,
    offset: Vec<usize>,
    positions: usize,
    /// Successors sorted by block id with the exit last.
    succ: Vec<Vec<(usize, Cost)>>,
    pred: Vec<Vec<(usize, Cost)>>,
}

impl Layout {
    fn new(graph: &Cscfg, body: &FunctionBody) -> Self {
        let blocks = body.blocks.clone();
        let callees: Vec<Vec<FunctionRef>> = blocks
            .iter()
            .map(|b| graph.block(b).expect("body block").callees.iter().map(|c| c.callee.clone()).collect())
            .collect();
        let mut offset = Vec::with_capacity(blocks.len());
        let mut next = 2;
        for c in &callees {
            offset.push(next);
            next += c.len() + 1;
        }
        let index: HashMap<&BlockId, usize> = blocks.iter().enumerate().map(|(i, b)| (b, i)).collect();
        let mut lay = Layout {
            callees,
            offset,
            positions: next,
            succ: vec![Vec::new(); next],
            pred: vec![Vec::new(); next],
        };
        let mut entry_succ: Vec<usize> = body.entries.iter().map(|e| index[e]).collect();
        entry_succ.sort_by(|a, b| blocks[*a].cmp(&blocks[*b]));
        let mut edges: Vec<(usize, usize, Cost)> = Vec::new();
        for j in entry_succ {
            edges.push((ENTRY, lay.slot(j, 0), (0, 0)));
        }
        if body.skippable {
            edges.push((ENTRY, EXIT, (0, 0)));
        }
        for (j, b) in blocks.iter().enumerate() {
            let len = lay.callees[j].len();
            for k in 0..len {
                edges.push((lay.slot(j, k), lay.slot(j, k + 1), (1, 0)));
            }
            let mut tos: Vec<usize> = body.successors(b).map(|t| index[t]).collect();
            tos.sort_by(|x, y| blocks[*x].cmp(&blocks[*y]));
            for t in tos {
                edges.push((lay.slot(j, len), lay.slot(t, 0), (0, 0)));
            }
            if body.exits.contains(b) {
                edges.push((lay.slot(j, len), EXIT, (0, 0)));
            }
        }
        for (u, v, w) in edges {
            lay.succ[u].push((v, w));
            lay.pred[v].push((u, w));
        }
        lay
    }

    fn slot(&self, block: usize, slot: usize) -> usize {
        self.offset[block] + slot
    }

    /// `(block, slot)` for a position with a callee to take.
    fn slot_of(&self, pos: usize) -> Option<(usize, usize)> {
        if pos < 2 {
            return None;
        }
        let j = self.offset.partition_point(|&o| o <= pos) - 1;
        let k = pos - self.offset[j];
        (k < self.callees[j].len()).then_some((j, k))
    }
}

fn compute(graph: &Cscfg, trace: &Trace, map: &SpanFunctionMap, order: &[usize]) -> Result<Template, AlignError> {
    let resolved: Vec<Option<FunctionRef>> = trace
        .spans()
        .iter()
        .map(|s| map.resolve(s).function().cloned())
        .collect();
    let mut ctx = Ctx {
        graph,
        trace,
        resolved,
        locals: HashMap::new(),
    };
    for &s in order.iter().rev() {
        if ctx.resolved[s].is_some() {
            ctx.solve(s);
        }
    }
    let mut top = Vec::new();
    ctx.flatten(&[root_of(trace)], &mut top);
    let root_item = top.iter().position(|it| matches!(it, Item::Mapped(_)));
    let no_path = |span: usize| AlignError::NoPath {
        trace_id: trace.trace_id().to_string(),
        span: trace.spans()[span].span_id.clone(),
    };
    let Some(root_item) = root_item else {
        return Err(no_path(root_of(trace)));
    };
    let Item::Mapped(root_span) = top[root_item] else { unreachable!() };
    let root_fn = ctx.resolved[root_span].clone().expect("mapped");
    if !graph.is_defined(&root_fn) && !graph.is_external(&root_fn) {
        return Err(no_path(root_span));
    }

    let mut pos_of = vec![0u32; trace.len()];
    for (p, &s) in order.iter().enumerate() {
        pos_of[s] = p as u32;
    }
    let mut out = Template {
        steps: Vec::new(),
        invocations: vec![Invocation {
            function: None,
            caller_step: None,
        }],
        cost: 0,
        insertions: 0,
        skips: 0,
    };
    let mut emit = Emitter {
        ctx: &ctx,
        pos_of: &pos_of,
        out: &mut out,
    };
    for (n, &item) in top.iter().enumerate() {
        match item {
            Item::Mapped(s) if n == root_item => {
                let step = emit.push(StepKind::Root { function: root_fn.clone() }, Some(s), 0);
                emit.invocation(s, step);
            }
            _ => emit.insert(item, 0),
        }
    }
    let total = top.iter().enumerate().fold((0, 0), |acc, (n, &it)| {
        add(acc, if n == root_item { ctx.locals[&root_span].cost } else { ctx.item_insert_cost(it) })
    });
    out.cost = total.0;
    out.insertions = total.1;
    Ok(out)
}

fn root_of(trace: &Trace) -> usize {
    trace.root_index()
}

struct Emitter<'a, 'c> {
    ctx: &'a Ctx<'c>,
    pos_of: &'a [u32],
    out: &'a mut Template,
}

impl Emitter<'_, '_> {
    fn push(&mut self, kind: StepKind, span: Option<usize>, inv: usize) -> usize {
        self.out.steps.push((kind, span.map(|s| self.pos_of[s]), inv));
        self.out.steps.len() - 1
    }

    fn insert(&mut self, item: Item, inv: usize) {
        match item {
            Item::Unmapped(s) => {
                self.push(StepKind::Inserted, Some(s), inv);
            }
            Item::Mapped(s) => {
                let step = self.push(StepKind::Inserted, Some(s), inv);
                self.invocation(s, step);
            }
        }
    }

    /// Emits the invocation opened by mapped span `s` at `caller_step`.
    fn invocation(&mut self, s: usize, caller_step: usize) {
        let local = &self.ctx.locals[&s];
        self.out.invocations.push(Invocation {
            function: self.ctx.resolved[s].clone(),
            caller_step: Some(caller_step),
        });
        let inv = self.out.invocations.len() - 1;
        self.out.skips += local.skips;
        let body = local.body.as_ref().and_then(|f| self.ctx.graph.function(f));
        let mut visits: HashMap<usize, u32> = HashMap::new();
        for action in &local.actions {
            match *action {
                Action::Enter { block } => {
                    *visits.entry(block).or_insert(0) += 1;
                }
                Action::Match { block, slot, item } => {
                    let b = body.expect("matched in a body").blocks[block].clone();
                    let Item::Mapped(child) = local.items[item] else { unreachable!() };
                    let visit = visits[&block] - 1;
                    let step = self.push(StepKind::Call { block: b, slot, visit }, Some(child), inv);
                    self.invocation(child, step);
                }
                Action::Skip { block, slot } => {
                    let b = body.expect("skipped in a body").blocks[block].clone();
                    let visit = visits[&block] - 1;
                    self.push(StepKind::Call { block: b, slot, visit }, None, inv);
                }
                Action::Insert { item } => self.insert(local.items[item], inv),
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::cscfg::{build_cscfg, BlockDoc, CallGraphDoc, FunctionDoc, SCHEMA_VERSION};
    use crate::mapping::build_map;
    use crate::model::{Span, SpanId};
    use std::collections::BTreeMap;

    fn fr(name: &str) -> FunctionRef {
        FunctionRef::new("svc", "C", name)
    }

    fn fdoc(name: &str, entry: Option<&str>, exits: &[&str], blocks: &[(&str, &[&str])], edges: &[(&str, &str)]) -> FunctionDoc {
        FunctionDoc {
            service: "svc".into(),
            class_name: "C".into(),
            function_name: name.into(),
            entry: entry.map(str::to_string),
            exits: exits.iter().map(|s| s.to_string()).collect(),
            blocks: blocks
                .iter()
                .map(|(id, calls)| BlockDoc {
                    id: id.to_string(),
                    calls: calls.iter().map(|c| fr(c)).collect(),
                })
                .collect(),
            edges: edges.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        }
    }

    /// preserve -> createOrder, then comfort {getComfortClass, dispatchComfort, getPrice} or economy {getEconomyClass, dispatchEconomy}
    pub(crate) fn comfort_graph() -> Cscfg {
        let mut functions = vec![fdoc(
            "preserve",
            Some("start"),
            &["comfort", "economy"],
            &[
                ("start", &["createOrder"]),
                ("comfort", &["getComfortClass", "dispatchComfort", "getPrice"]),
                ("economy", &["getEconomyClass", "dispatchEconomy"]),
            ],
            &[("start", "comfort"), ("start", "economy")],
        )];
        for leaf in ["createOrder", "getComfortClass", "dispatchComfort", "getPrice", "getEconomyClass", "dispatchEconomy"] {
            functions.push(fdoc(leaf, None, &[], &[], &[]));
        }
        build_cscfg(&CallGraphDoc {
            schema_version: SCHEMA_VERSION,
            functions,
            external: vec![],
        })
        .unwrap()
    }

    fn mk(spans: &[(&str, Option<&str>, &str, u64, u64)]) -> Trace {
        Trace::new(
            "t1",
            spans
                .iter()
                .map(|(id, parent, op, start, dur)| Span {
                    span_id: SpanId::new(*id),
                    trace_id: "t1".into(),
                    parent_id: parent.map(SpanId::new),
                    operation: op.to_string(),
                    service: "svc".into(),
                    start_time: *start,
                    duration: *dur,
                    attributes: BTreeMap::new(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn comfort_trace() -> Trace {
        mk(&[
            ("r", None, "C.preserve", 0, 100),
            ("a", Some("r"), "C.createOrder", 1, 10),
            ("b", Some("r"), "C.getComfortClass", 20, 10),
            ("c", Some("r"), "C.dispatchComfort", 40, 10),
            ("d", Some("r"), "C.getPrice", 60, 10),
        ])
    }

    fn blocks_of(p: &ExecutionPath) -> Vec<String> {
        p.steps
            .iter()
            .filter_map(|s| match &s.kind {
                StepKind::Call { block, slot, .. } => Some(format!("{block}[{slot}]")),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn comfort_trace_aligns_exactly() {
        let g = comfort_graph();
        let map = build_map(&g, &[]).unwrap();
        let p = align_uncached(&g, &comfort_trace(), &map).unwrap();
        assert_eq!(p.cost, 0);
        assert_eq!(p.insertions, 0);
        assert_eq!(blocks_of(&p), ["start[0]", "comfort[0]", "comfort[1]", "comfort[2]"]);
        assert_eq!(p.steps.len(), 5);
        assert!(matches!(p.steps[0].kind, StepKind::Root { .. }));
    }

    #[test]
    fn url_span_costs_one_insertion() {
        let g = comfort_graph();
        let map = build_map(&g, &[]).unwrap();
        let t = mk(&[
            ("r", None, "C.preserve", 0, 100),
            ("a", Some("r"), "C.createOrder", 1, 10),
            ("u", Some("r"), "GET /api/v1/price", 15, 2),
            ("b", Some("r"), "C.getComfortClass", 20, 10),
            ("c", Some("r"), "C.dispatchComfort", 40, 10),
            ("d", Some("r"), "C.getPrice", 60, 10),
        ]);
        let p = align_uncached(&g, &t, &map).unwrap();
        assert_eq!((p.cost, p.insertions), (1, 1));
        assert_eq!(blocks_of(&p), ["start[0]", "comfort[0]", "comfort[1]", "comfort[2]"]);
        let inserts = p.alignment_inserts(&t);
        assert_eq!(inserts.len(), 1);
        assert_eq!(inserts[0].after_block, Some(BlockId::from("start")));
    }

    #[test]
    fn every_span_in_exactly_one_step() {
        let g = comfort_graph();
        let map = build_map(&g, &[]).unwrap();
        let t = mk(&[
            ("w", None, "GET /preserve", 0, 200),
            ("r", Some("w"), "C.preserve", 1, 100),
            ("a", Some("r"), "C.createOrder", 2, 10),
            ("x", Some("a"), "Unknown.thing", 3, 1),
            ("b", Some("r"), "C.getEconomyClass", 20, 10),
            ("c", Some("r"), "C.getPrice", 40, 10),
        ]);
        let p = align_uncached(&g, &t, &map).unwrap();
        let mut seen: Vec<&str> = p.steps.iter().filter_map(|s| s.span.as_ref().map(|s| s.as_str())).collect();
        seen.sort();
        assert_eq!(seen, ["a", "b", "c", "r", "w", "x"]);
        // economy branch taken, getPrice inserted, dispatchEconomy skipped
        assert_eq!(p.cost, 1 + 1 + 1 + 1);
        assert_eq!(p.skips, 1);
        assert!(p.render(&t).contains("skip  economy[1]"));
    }

    #[test]
    fn unknown_entry_is_no_path() {
        let g = comfort_graph();
        let map = build_map(&g, &[]).unwrap();
        let t = mk(&[("r", None, "GET /x", 0, 10), ("a", Some("r"), "Nope.nope", 1, 2)]);
        assert_eq!(
            align_uncached(&g, &t, &map).unwrap_err(),
            AlignError::NoPath {
                trace_id: "t1".into(),
                span: SpanId::new("r")
            }
        );
    }

    #[test]
    fn cache_hits_on_same_shape() {
        let g = comfort_graph();
        let map = build_map(&g, &[]).unwrap();
        let cache = PathCache::new(4);
        let t1 = comfort_trace();
        let t2 = mk(&[
            ("r", None, "C.preserve", 0, 900),
            ("a", Some("r"), "C.createOrder", 1, 90),
            ("b", Some("r"), "C.getComfortClass", 200, 90),
            ("c", Some("r"), "C.dispatchComfort", 400, 90),
            ("d", Some("r"), "C.getPrice", 600, 90),
        ]);
        let p1 = align(&g, &t1, &map, &cache).unwrap();
        let p2 = align(&g, &t2, &map, &cache).unwrap();
        assert_eq!((cache.hits(), cache.misses()), (1, 1));
        assert_eq!(p1, p2);
        assert_eq!(p1, align_uncached(&g, &t1, &map).unwrap());
    }

    #[test]
    fn capacity_one_cache_evicts() {
        let g = comfort_graph();
        let map = build_map(&g, &[]).unwrap();
        let cache = PathCache::new(1);
        let a = comfort_trace();
        let b = mk(&[("r", None, "C.preserve", 0, 100), ("a", Some("r"), "C.createOrder", 1, 10)]);
        for t in [&a, &b, &a, &b] {
            align(&g, t, &map, &cache).unwrap();
        }
        assert_eq!((cache.hits(), cache.misses()), (0, 4));
    }
}
