//! Aligns generated traces with the call graph, then aligns a damaged copy
//! with one span missing and one unknown span added.

use spanscope::align::{align, PathCache};
use spanscope::harness::{generate_system, generate_traces, SystemSpec};
use spanscope::model::{Span, SpanId, Trace};

fn main() {
    let sys = generate_system(&SystemSpec::comfort_economy(3)).unwrap();
    let graph = sys.graph().unwrap();
    let map = sys.map(&graph).unwrap();
    let cache = PathCache::new(64);
    let traces = generate_traces(&sys, 50, &[]).unwrap();
    for t in &traces {
        align(&graph, &t.trace, &map, &cache).unwrap();
    }
    println!("50 traces aligned, {} cache hits", cache.hits());

    let t = &traces[0].trace;
    let path = align(&graph, t, &map, &cache).unwrap();
    println!("\n{} (cost {}):\n{}", t.trace_id(), path.cost, path.render(t));

    // drop a leaf span and hang an unmappable span under the root
    let leaf = t.spans().iter().rev().find(|s| t.children_of(&s.span_id).unwrap().is_empty()).unwrap();
    let mut spans: Vec<Span> = t.spans().iter().filter(|s| s.span_id != leaf.span_id).cloned().collect();
    let root = t.root().clone();
    spans.push(Span {
        span_id: SpanId::new("extra"),
        parent_id: Some(root.span_id.clone()),
        operation: "GET /health".into(),
        service: "gateway".into(),
        start_time: root.start_time,
        duration: 1,
        ..root
    });
    let damaged = Trace::new(t.trace_id(), spans).unwrap();
    let path = align(&graph, &damaged, &map, &cache).unwrap();
    println!(
        "without {} and with an extra span: cost {}, {} skipped slots, {} inserted spans\n{}",
        leaf.operation,
        path.cost,
        path.skips,
        path.insertions,
        path.render(&damaged)
    );
    for ins in path.alignment_inserts(&damaged) {
        println!("insert record: {ins:?}");
    }
}
