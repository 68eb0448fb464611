#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spanscope::cscfg::{BlockDoc, CallGraphDoc, FunctionDoc, FunctionRef, SCHEMA_VERSION};
use spanscope::model::{Span, SpanId, Trace};

pub fn leaf_ref(i: usize) -> FunctionRef {
    FunctionRef::new("lib", "Leaf", format!("l{i}"))
}

pub fn root_ref() -> FunctionRef {
    FunctionRef::new("app", "Main", "run")
}

fn leaf_doc(f: &FunctionRef) -> FunctionDoc {
    FunctionDoc {
        service: f.service.clone(),
        class_name: f.class_name.clone(),
        function_name: f.function_name.clone(),
        entry: None,
        exits: Vec::new(),
        blocks: Vec::new(),
        edges: Vec::new(),
    }
}

/// Random single-function graph. Block `i` always has a successor after it
/// (or is an exit) and a predecessor before it, so every block is reachable
/// and reaches the exit. With `loops`, back edges are added too.
pub fn random_doc(rng: &mut ChaCha8Rng, n: usize, leaves: usize, loops: bool) -> CallGraphDoc {
    let id = |i: usize| format!("b{i}");
    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    for j in 1..n {
        edges.insert((rng.random_range(0..j), j));
    }
    for i in 0..n {
        for _ in 0..rng.random_range(0..=2) {
            if i + 1 < n {
                edges.insert((i, rng.random_range(i + 1..n)));
            }
        }
        if loops && rng.random_bool(0.2) {
            edges.insert((i, rng.random_range(0..=i)));
        }
    }
    let mut exits: Vec<String> = (0..n)
        .filter(|&i| i + 1 == n || !edges.iter().any(|&(a, b)| a == i && b > i) || rng.random_bool(0.15))
        .map(id)
        .collect();
    exits.dedup();
    let blocks = (0..n)
        .map(|i| BlockDoc {
            id: id(i),
            calls: (0..rng.random_range(1..=2)).map(|_| leaf_ref(rng.random_range(0..leaves))).collect(),
        })
        .collect();
    let root = root_ref();
    let mut functions = vec![FunctionDoc {
        service: root.service.clone(),
        class_name: root.class_name.clone(),
        function_name: root.function_name.clone(),
        entry: Some(id(0)),
        exits,
        blocks,
        edges: edges.into_iter().map(|(a, b)| (id(a), id(b))).collect(),
    }];
    functions.extend((0..leaves).map(|i| leaf_doc(&leaf_ref(i))));
    CallGraphDoc {
        schema_version: SCHEMA_VERSION,
        functions,
        external: Vec::new(),
    }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Node-level view of the root function: 0 entry, 1..=n blocks, n+1 exit.
pub struct Nodes {
    pub names: Vec<String>,
    pub succ: Vec<Vec<usize>>,
}

impl Nodes {
    pub fn of(doc: &CallGraphDoc) -> Self {
        let f = &doc.functions[0];
        let n = f.blocks.len();
        let idx: BTreeMap<&str, usize> = f.blocks.iter().enumerate().map(|(i, b)| (b.id.as_str(), i + 1)).collect();
        let mut succ = vec![Vec::new(); n + 2];
        succ[0].push(idx[f.entry.as_deref().unwrap()]);
        for (a, b) in &f.edges {
            succ[idx[a.as_str()]].push(idx[b.as_str()]);
        }
        for e in &f.exits {
            succ[idx[e.as_str()]].push(n + 1);
        }
        for s in &mut succ {
            s.sort();
            s.dedup();
        }
        Nodes {
            names: f.blocks.iter().map(|b| b.id.clone()).collect(),
            succ,
        }
    }

    pub fn exit(&self) -> usize {
        self.succ.len() - 1
    }

    fn pred(&self) -> Vec<Vec<usize>> {
        let mut p = vec![Vec::new(); self.succ.len()];
        for (u, vs) in self.succ.iter().enumerate() {
            for &v in vs {
                p[v].push(u);
            }
        }
        p
    }

    /// `dom[b]` holds every node on all simple paths from `start` to `b`,
    /// found by enumerating those paths.
    fn all_paths_dom(start: usize, adj: &[Vec<usize>]) -> Vec<Option<BTreeSet<usize>>> {
        let mut dom: Vec<Option<BTreeSet<usize>>> = vec![None; adj.len()];
        let mut path = vec![start];
        let mut on = vec![false; adj.len()];
        on[start] = true;
        fn walk(v: usize, adj: &[Vec<usize>], path: &mut Vec<usize>, on: &mut [bool], dom: &mut [Option<BTreeSet<usize>>]) {
            let here: BTreeSet<usize> = path.iter().copied().collect();
            dom[v] = Some(match dom[v].take() {
                None => here,
                Some(d) => d.intersection(&here).copied().collect(),
            });
            for &w in &adj[v] {
                if !on[w] {
                    on[w] = true;
                    path.push(w);
                    walk(w, adj, path, on, dom);
                    path.pop();
                    on[w] = false;
                }
            }
        }
        walk(start, adj, &mut path, &mut on, &mut dom);
        dom
    }

    pub fn dominators(&self) -> Vec<BTreeSet<usize>> {
        Self::all_paths_dom(0, &self.succ).into_iter().map(Option::unwrap_or_default).collect()
    }

    pub fn post_dominators(&self) -> Vec<BTreeSet<usize>> {
        Self::all_paths_dom(self.exit(), &self.pred())
            .into_iter()
            .map(Option::unwrap_or_default)
            .collect()
    }

    /// Every simple entry-to-exit path, as node lists without the virtual ends.
    pub fn simple_paths(&self, limit: usize) -> Option<Vec<Vec<usize>>> {
        let mut out = Vec::new();
        let mut path = Vec::new();
        let mut on = vec![false; self.succ.len()];
        fn walk(n: &Nodes, v: usize, path: &mut Vec<usize>, on: &mut [bool], out: &mut Vec<Vec<usize>>, limit: usize) -> bool {
            if v == n.exit() {
                out.push(path.clone());
                return out.len() <= limit;
            }
            for &w in &n.succ[v] {
                if on[w] {
                    continue;
                }
                on[w] = true;
                if w != n.exit() {
                    path.push(w);
                }
                let ok = walk(n, w, path, on, out, limit);
                if w != n.exit() {
                    path.pop();
                }
                on[w] = false;
                if !ok {
                    return false;
                }
            }
            true
        }
        on[0] = true;
        walk(self, 0, &mut path, &mut on, &mut out, limit).then_some(out)
    }
}

/// Edit distance of a span sequence against a slot sequence: match 0,
/// skip a slot 1, insert a span 1, no substitution.
pub fn edit_distance(slots: &[FunctionRef], spans: &[Option<FunctionRef>]) -> u64 {
    let (n, m) = (slots.len(), spans.len());
    let mut d = vec![vec![u64::MAX; m + 1]; n + 1];
    d[0][0] = 0;
    for i in 0..=n {
        for j in 0..=m {
            let cur = d[i][j];
            if cur == u64::MAX {
                continue;
            }
            if i < n {
                d[i + 1][j] = d[i + 1][j].min(cur + 1);
            }
            if j < m {
                d[i][j + 1] = d[i][j + 1].min(cur + 1);
            }
            if i < n && j < m && spans[j].as_ref() == Some(&slots[i]) {
                d[i + 1][j + 1] = d[i + 1][j + 1].min(cur);
            }
        }
    }
    d[n][m]
}

/// Allocation written out step by step from the algorithm's description.
pub fn budget_oracle(sizes: &[usize], p: f64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let budget = (p * total as f64).floor() as usize;
    let n = sizes.len();
    let mut out = Vec::with_capacity(n);
    if budget < n {
        for _ in 0..n {
            out.push(1);
        }
        return out;
    }
    let leftover = budget - n;
    for &d in sizes {
        // floor(leftover * d / total) by exact integer division
        let num = leftover as u128 * d as u128;
        out.push(1 + (num / total as u128) as usize);
    }
    out
}

pub fn span(trace: &str, id: &str, parent: Option<&str>, service: &str, op: &str, start: u64, dur: u64) -> Span {
    Span {
        span_id: SpanId::new(id),
        trace_id: trace.into(),
        parent_id: parent.map(SpanId::new),
        operation: op.into(),
        service: service.into(),
        start_time: start,
        duration: dur,
        attributes: BTreeMap::new(),
    }
}

/// A root span of `root_ref()` with flat children; `None` is an unmapped span.
pub fn flat_trace(children: &[Option<FunctionRef>]) -> Trace {
    let root = root_ref();
    let mut spans = vec![span("t", "r", None, &root.service, &root.operation(), 0, 10 * children.len() as u64 + 10)];
    for (i, c) in children.iter().enumerate() {
        let (svc, op) = match c {
            Some(f) => (f.service.clone(), f.operation()),
            None => ("gw".to_string(), format!("GET /x/{i}")),
        };
        spans.push(span("t", &format!("c{i}"), Some("r"), &svc, &op, 10 * i as u64 + 1, 5));
    }
    Trace::new("t", spans).unwrap()
}
