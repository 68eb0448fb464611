//! Splits traces of the comfort/economy order flow into dominant span sets.
//! The two branches give different set signatures, so keeping one span per
//! set is enough to tell which branch ran.

use std::collections::BTreeMap;

use spanscope::align::{align, PathCache};
use spanscope::harness::{generate_system, generate_traces, SystemSpec};
use spanscope::partition::{dss_signature, partition};

fn main() {
    let sys = generate_system(&SystemSpec::comfort_economy(1)).unwrap();
    let graph = sys.graph().unwrap();
    let map = sys.map(&graph).unwrap();
    let cache = PathCache::new(64);
    let mut seen: BTreeMap<Vec<String>, (usize, String)> = BTreeMap::new();
    for t in generate_traces(&sys, 200, &[]).unwrap() {
        let path = align(&graph, &t.trace, &map, &cache).unwrap();
        let dss = partition(&path, &graph);
        let entry = seen.entry(dss_signature(&dss)).or_insert((0, String::new()));
        entry.0 += 1;
        if entry.1.is_empty() {
            for d in &dss {
                let ops: Vec<&str> = d.spans.iter().map(|s| t.trace.get(s).unwrap().operation.as_str()).collect();
                entry.1 += &format!("    set {} [{}]: {}\n", d.dss_id, d.branch_tag, ops.join(", "));
            }
        }
    }
    for (sig, (count, example)) in &seen {
        println!("{count} traces with signature {sig:?}\n{example}");
    }
}
