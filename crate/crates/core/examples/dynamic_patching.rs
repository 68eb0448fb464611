//! Removes calls from a generated call graph, as a static analysis that
//! misses dynamic dispatch would, and patches them back from traces.

use spanscope::cscfg::build_cscfg;
use spanscope::harness::{generate_system, generate_traces, SystemSpec};
use spanscope::mapping::build_map;

fn main() {
    let sys = generate_system(&SystemSpec { seed: 2, ..SystemSpec::default() }).unwrap();
    let full = build_cscfg(&sys.doc).unwrap();
    let mut doc = sys.doc.clone();
    let mut removed = Vec::new();
    for f in doc.functions.iter_mut() {
        for b in f.blocks.iter_mut().filter(|b| b.calls.len() > 1) {
            if removed.len() < 4 {
                removed.push((b.id.clone(), b.calls.pop().unwrap()));
            }
        }
    }
    for (block, callee) in &removed {
        println!("removed call {block} -> {callee}");
    }
    let mut graph = build_cscfg(&doc).unwrap();
    let map = build_map(&full, &sys.shared).unwrap();
    let traces: Vec<_> = generate_traces(&sys, 300, &[]).unwrap().into_iter().map(|t| t.trace).collect();
    let report = graph.patch_with_traces(&traces, &map);
    println!("{report:?}");
    let again = graph.patch_with_traces(&traces, &map);
    println!("second pass adds {} edges", again.added_edges);
    println!("patched graph matches the original call sites: {}", graph.call_edges().len() == full.call_edges().len());
}
