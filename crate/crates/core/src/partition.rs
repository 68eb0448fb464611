//! Splitting an aligned trace into dominant span sets.
//!
//! A span set groups the spans whose steps share a presence condition: a
//! class of control-equivalent blocks in one invocation, at one visit
//! count. The entry class of an invocation on its first visit executes
//! whenever the call that opened the invocation does, so it joins the
//! caller's set; the root invocation's entry class is the trunk. Inserted
//! steps join the set of the step before them.
//!
//! On graphs without merge points this is the same as cutting the path
//! after every fork.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::align::{ExecutionPath, StepKind};
use crate::cscfg::{Cscfg, DominanceInfo};
use crate::model::SpanId;

pub const TRUNK: &str = "trunk";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DominantSpanSet {
    pub dss_id: usize,
    pub spans: Vec<SpanId>,
    /// Indices of the path steps the set covers.
    pub anchor: Vec<usize>,
    pub branch_tag: String,
}

impl DominantSpanSet {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Condition {
    Trunk,
    Class { invocation: usize, class: usize, visit: u32 },
}

fn step_conditions(path: &ExecutionPath, graph: &Cscfg) -> Vec<Condition> {
    let mut dominance: HashMap<usize, std::sync::Arc<DominanceInfo>> = HashMap::new();
    let mut cond: Vec<Condition> = Vec::with_capacity(path.steps.len());
    for (idx, step) in path.steps.iter().enumerate() {
        let c = match &step.kind {
            StepKind::Root { .. } => Condition::Trunk,
            StepKind::Inserted => cond.last().copied().unwrap_or(Condition::Trunk),
            StepKind::Call { block, visit, .. } => {
                let inv = &path.invocations[step.invocation];
                let info = dominance.entry(step.invocation).or_insert_with(|| {
                    let f = inv.function.as_ref().expect("call steps live in a function");
                    graph.dominance(f).expect("graph bodies are validated on build")
                });
                let class = info.class_of(block).expect("block belongs to the invocation's function");
                if class == DominanceInfo::ENTRY_CLASS && *visit == 0 {
                    match inv.caller_step {
                        Some(s) if s < idx => cond[s],
                        _ => Condition::Trunk,
                    }
                } else {
                    Condition::Class {
                        invocation: step.invocation,
                        class,
                        visit: *visit,
                    }
                }
            }
        };
        cond.push(c);
    }
    cond
}

/// Partitions the spans of an aligned trace. Pure in `(path, graph)`.
pub fn partition(path: &ExecutionPath, graph: &Cscfg) -> Vec<DominantSpanSet> {
    let cond = step_conditions(path, graph);
    let mut tag: HashMap<Condition, String> = HashMap::new();
    let mut index: HashMap<Condition, usize> = HashMap::new();
    let mut out: Vec<DominantSpanSet> = Vec::new();
    let mut pending: HashMap<Condition, Vec<usize>> = HashMap::new();
    for (i, step) in path.steps.iter().enumerate() {
        let c = cond[i];
        tag.entry(c).or_insert_with(|| match (&c, &step.kind) {
            (Condition::Class { .. }, StepKind::Call { block, .. }) => block.0.clone(),
            _ => TRUNK.to_string(),
        });
        let Some(span) = &step.span else {
            pending.entry(c).or_default().push(i);
            continue;
        };
        let k = *index.entry(c).or_insert_with(|| {
            out.push(DominantSpanSet {
                dss_id: out.len(),
                spans: Vec::new(),
                anchor: pending.remove(&c).unwrap_or_default(),
                branch_tag: tag[&c].clone(),
            });
            out.len() - 1
        });
        out[k].spans.push(span.clone());
        out[k].anchor.push(i);
    }
    for (c, steps) in pending {
        if let Some(&k) = index.get(&c) {
            out[k].anchor.extend(steps);
            out[k].anchor.sort_unstable();
        }
    }
    out
}

/// Branch tags in order; equal signatures mean the same branches were taken.
pub fn dss_signature(dss: &[DominantSpanSet]) -> Vec<String> {
    dss.iter().map(|d| d.branch_tag.clone()).collect()
}

/// Steps that leave a block with more than one way out.
pub fn fork_steps(path: &ExecutionPath, graph: &Cscfg) -> usize {
    path.steps
        .iter()
        .filter(|s| match &s.kind {
            StepKind::Call { block, slot, .. } => {
                let b = graph.block(block).expect("path blocks exist");
                *slot + 1 == b.callees.len()
                    && graph.function(&b.owner).is_some_and(|f| f.out_degree(block) > 1)
            }
            _ => false,
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::align_uncached;
    use crate::cscfg::{build_cscfg, BlockDoc, CallGraphDoc, FunctionDoc, FunctionRef, SCHEMA_VERSION};
    use crate::mapping::build_map;
    use crate::model::{Span, Trace};
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

    fn graph(mut functions: Vec<FunctionDoc>, leaves: &[&str]) -> Cscfg {
        functions.extend(leaves.iter().map(|l| fdoc(l, None, &[], &[], &[])));
        build_cscfg(&CallGraphDoc {
            schema_version: SCHEMA_VERSION,
            functions,
            external: vec![],
        })
        .unwrap()
    }

    /// Root `main` with the given children calling leaf operations.
    fn flat_trace(root: &str, children: &[&str]) -> Trace {
        let mut spans = vec![Span {
            span_id: SpanId::new("r"),
            trace_id: "t".into(),
            parent_id: None,
            operation: format!("C.{root}"),
            service: "svc".into(),
            start_time: 0,
            duration: 1000,
            attributes: BTreeMap::new(),
        }];
        for (i, c) in children.iter().enumerate() {
            spans.push(Span {
                span_id: SpanId::new(format!("s{i}")),
                trace_id: "t".into(),
                parent_id: Some(SpanId::new("r")),
                operation: format!("C.{c}"),
                service: "svc".into(),
                start_time: 10 * (i as u64 + 1),
                duration: 5,
                attributes: BTreeMap::new(),
            });
        }
        Trace::new("t", spans).unwrap()
    }

    fn run(g: &Cscfg, t: &Trace) -> Vec<DominantSpanSet> {
        let map = build_map(g, &[]).unwrap();
        let p = align_uncached(g, t, &map).unwrap();
        assert_eq!(p.cost, 0, "{}", p.render(t));
        let d = partition(&p, g);
        assert_eq!(d.len(), 1 + fork_steps(&p, g));
        d
    }

    fn comfort() -> Cscfg {
        graph(
            vec![fdoc(
                "preserve",
                Some("start"),
                &["comfort", "economy"],
                &[
                    ("start", &["createOrder"]),
                    ("comfort", &["getComfortClass", "dispatchComfort", "getPrice"]),
                    ("economy", &["getEconomyClass", "dispatchEconomy"]),
                ],
                &[("start", "comfort"), ("start", "economy")],
            )],
            &["createOrder", "getComfortClass", "dispatchComfort", "getPrice", "getEconomyClass", "dispatchEconomy"],
        )
    }

    #[test]
    fn straight_line_is_one_set() {
        let g = graph(
            vec![fdoc("main", Some("a"), &["b"], &[("a", &["x", "y"]), ("b", &["z"])], &[("a", "b")])],
            &["x", "y", "z"],
        );
        let d = run(&g, &flat_trace("main", &["x", "y", "z"]));
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].spans.len(), 4);
        assert_eq!(dss_signature(&d), [TRUNK]);
    }

    #[test]
    fn comfort_and_economy_signatures() {
        let g = comfort();
        let d = run(&g, &flat_trace("preserve", &["createOrder", "getComfortClass", "dispatchComfort", "getPrice"]));
        assert_eq!(d.len(), 2);
        assert_eq!(d.iter().map(|s| s.len()).collect::<Vec<_>>(), [2, 3]);
        assert_eq!(dss_signature(&d), [TRUNK, "comfort"]);
        let e = run(&g, &flat_trace("preserve", &["createOrder", "getEconomyClass", "dispatchEconomy"]));
        assert_eq!(dss_signature(&e), [TRUNK, "economy"]);
    }

    #[test]
    fn two_forks_over_nine_spans() {
        // a -> {b -> {d, e}, c}
        let g = graph(
            vec![fdoc(
                "main",
                Some("a"),
                &["c", "d", "e"],
                &[("a", &["l1", "l2"]), ("b", &["l3", "l4"]), ("c", &["l5"]), ("d", &["l6", "l7", "l8"]), ("e", &["l9"])],
                &[("a", "b"), ("a", "c"), ("b", "d"), ("b", "e")],
            )],
            &["l1", "l2", "l3", "l4", "l5", "l6", "l7", "l8", "l9"],
        );
        let t = flat_trace("main", &["l1", "l2", "l3", "l4", "l6", "l7", "l8"]);
        let d = run(&g, &t);
        assert_eq!(d.len(), 3);
        assert_eq!(d.iter().map(|s| s.len()).sum::<usize>(), t.len());
        assert_eq!(dss_signature(&d), [TRUNK, "b", "d"]);
    }

    #[test]
    fn merge_point_returns_to_trunk() {
        let g = graph(
            vec![fdoc(
                "main",
                Some("a"),
                &["j"],
                &[("a", &["x"]), ("l", &["y"]), ("r", &["z"]), ("j", &["w"])],
                &[("a", "l"), ("a", "r"), ("l", "j"), ("r", "j")],
            )],
            &["x", "y", "z", "w"],
        );
        let map = build_map(&g, &[]).unwrap();
        let t = flat_trace("main", &["x", "y", "w"]);
        let p = align_uncached(&g, &t, &map).unwrap();
        let d = partition(&p, &g);
        assert_eq!(dss_signature(&d), [TRUNK, "l"]);
        assert_eq!(d[0].spans.iter().map(|s| s.as_str()).collect::<Vec<_>>(), ["r", "s0", "s2"]);
    }

    #[test]
    fn loop_iterations_are_separate_sets() {
        let g = graph(
            vec![fdoc(
                "main",
                Some("a"),
                &["x"],
                &[("a", &["p"]), ("h", &[]), ("b", &["q"]), ("x", &[])],
                &[("a", "h"), ("h", "b"), ("b", "h"), ("h", "x")],
            )],
            &["p", "q"],
        );
        let map = build_map(&g, &[]).unwrap();
        let t = flat_trace("main", &["p", "q", "q", "q"]);
        let p = align_uncached(&g, &t, &map).unwrap();
        assert_eq!(p.cost, 0);
        let d = partition(&p, &g);
        assert_eq!(d.len(), 4);
        assert_eq!(dss_signature(&d), [TRUNK, "b", "b", "b"]);
    }

    #[test]
    fn nested_callee_fork() {
        let g = graph(
            vec![
                fdoc("main", Some("m"), &["m"], &[("m", &["sub", "tail"])], &[]),
                fdoc(
                    "sub",
                    Some("s"),
                    &["l", "r"],
                    &[("s", &["x"]), ("l", &["y"]), ("r", &["z"])],
                    &[("s", "l"), ("s", "r")],
                ),
            ],
            &["x", "y", "z", "tail"],
        );
        let spans = vec![
            ("r", None, "C.main", 0, 100),
            ("a", Some("r"), "C.sub", 1, 50),
            ("b", Some("a"), "C.x", 2, 5),
            ("c", Some("a"), "C.z", 10, 5),
            ("d", Some("r"), "C.tail", 60, 5),
        ];
        let t = Trace::new(
            "t",
            spans
                .into_iter()
                .map(|(id, p, op, s, dur)| Span {
                    span_id: SpanId::new(id),
                    trace_id: "t".into(),
                    parent_id: p.map(SpanId::new),
                    operation: op.into(),
                    service: "svc".into(),
                    start_time: s,
                    duration: dur,
                    attributes: BTreeMap::new(),
                })
                .collect(),
        )
        .unwrap();
        let d = run(&g, &t);
        assert_eq!(dss_signature(&d), [TRUNK, "r"]);
        assert_eq!(d[0].spans.iter().map(|s| s.as_str()).collect::<Vec<_>>(), ["r", "a", "b", "d"]);
    }
}
