mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use spanscope::cscfg::{build_cscfg, mutual_dominance_classes, BlockId, DomNode, DominanceInfo};
use spanscope::harness::{generate_system, generate_traces, SystemSpec};
use spanscope::mapping::build_map;

use common::{random_doc, root_ref, seeded, Nodes};

fn node(names: &[String], i: usize) -> DomNode {
    if i == 0 {
        DomNode::Entry
    } else if i == names.len() + 1 {
        DomNode::Exit
    } else {
        DomNode::Block(BlockId::new(names[i - 1].clone()))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dominance_matches_path_oracle(seed in any::<u64>(), n in 1usize..=12, loops in any::<bool>()) {
        let doc = random_doc(&mut seeded(seed), n, 4, loops);
        let graph = build_cscfg(&doc).unwrap();
        let info = graph.dominance(&root_ref()).unwrap();
        let nodes = Nodes::of(&doc);
        let dom = nodes.dominators();
        let pdom = nodes.post_dominators();
        let total = n + 2;
        for a in 0..total {
            for b in 0..total {
                let (na, nb) = (node(&nodes.names, a), node(&nodes.names, b));
                prop_assert_eq!(info.dominates(&na, &nb), dom[b].contains(&a), "{} dom {}", a, b);
                prop_assert_eq!(info.post_dominates(&na, &nb), pdom[b].contains(&a), "{} pdom {}", a, b);
            }
        }
        let equiv = |a: usize, b: usize| (dom[b].contains(&a) && pdom[a].contains(&b)) || (dom[a].contains(&b) && pdom[b].contains(&a));
        for a in 1..=n {
            let ba = BlockId::new(nodes.names[a - 1].clone());
            let ca = info.class_of(&ba).unwrap();
            prop_assert_eq!(ca == DominanceInfo::ENTRY_CLASS, equiv(0, a));
            for b in 1..=n {
                let cb = info.class_of(&BlockId::new(nodes.names[b - 1].clone())).unwrap();
                prop_assert_eq!(ca == cb, equiv(a, b), "class of {} and {}", a, b);
            }
        }
    }

    #[test]
    fn classes_are_all_or_nothing_on_paths(seed in any::<u64>(), n in 1usize..=10, loops in any::<bool>()) {
        let doc = random_doc(&mut seeded(seed), n, 3, loops);
        let graph = build_cscfg(&doc).unwrap();
        let classes = mutual_dominance_classes(&graph, &root_ref()).unwrap();
        let nodes = Nodes::of(&doc);
        let all: BTreeSet<&BlockId> = classes.iter().flatten().collect();
        prop_assert_eq!(all.len(), n);
        let Some(paths) = nodes.simple_paths(5000) else { return Ok(()) };
        for path in paths {
            let on: BTreeSet<String> = path.iter().map(|&i| nodes.names[i - 1].clone()).collect();
            for class in &classes {
                let hit = class.iter().filter(|b| on.contains(b.as_str())).count();
                prop_assert!(hit == 0 || hit == class.len(), "{:?} split by {:?}", class, path);
            }
        }
    }

    #[test]
    fn patching_is_idempotent_and_monotone(seed in 0u64..40, drop in 0usize..6) {
        let sys = generate_system(&SystemSpec { seed, ..SystemSpec::default() }).unwrap();
        let full = build_cscfg(&sys.doc).unwrap();
        let mut doc = sys.doc.clone();
        // remove some static calls so that traces reveal them
        let mut removed = 0;
        for f in doc.functions.iter_mut() {
            for b in f.blocks.iter_mut() {
                if removed < drop && b.calls.len() > 1 {
                    b.calls.pop();
                    removed += 1;
                }
            }
        }
        let mut graph = build_cscfg(&doc).unwrap();
        let map = build_map(&full, &sys.shared).unwrap();
        let traces: Vec<_> = generate_traces(&sys, 150, &[]).unwrap().into_iter().map(|t| t.trace).collect();
        let before = graph.call_edges();
        let first = graph.patch_with_traces(&traces, &map);
        let after = graph.call_edges();
        for e in &before {
            prop_assert!(after.contains(e));
        }
        prop_assert!(after.len() >= before.len());
        let art = graph.to_artifact();
        let second = graph.patch_with_traces(&traces, &map);
        prop_assert_eq!(second.added_edges, 0);
        prop_assert_eq!(second.added_blocks, 0);
        prop_assert_eq!(graph.to_artifact(), art);
        if removed == 0 {
            prop_assert_eq!(first.added_edges + first.added_blocks, 0);
        }
    }
}

#[test]
fn straight_line_is_one_class() {
    let doc = spanscope::cscfg::parse_call_graph(
        r#"{"schema_version":1,"functions":[
            {"service":"s","class_name":"M","function_name":"main","entry":"b1","exits":["b3"],
             "blocks":[{"id":"b1","calls":[{"service":"s","class_name":"L","function_name":"f"}]},
                       {"id":"b2","calls":[{"service":"s","class_name":"L","function_name":"f"}]},
                       {"id":"b3","calls":[{"service":"s","class_name":"L","function_name":"f"}]}],
             "edges":[["b1","b2"],["b2","b3"]]},
            {"service":"s","class_name":"L","function_name":"f"}]}"#,
    )
    .unwrap();
    let graph = build_cscfg(&doc).unwrap();
    let main = spanscope::cscfg::FunctionRef::new("s", "M", "main");
    let classes = mutual_dominance_classes(&graph, &main).unwrap();
    assert_eq!(classes.len(), 1);
    assert_eq!(classes[0].len(), 3);
}
