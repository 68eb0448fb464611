//! Builds a small call graph and prints dominance and control-equivalence
//! classes for each function body.

use spanscope::cscfg::{build_cscfg, mutual_dominance_classes, parse_call_graph, BlockId, DomNode, FunctionRef};

const GRAPH: &str = r#"{"schema_version": 1, "functions": [
  {"service": "order", "class_name": "Order", "function_name": "create",
   "entry": "check", "exits": ["done"],
   "blocks": [
     {"id": "check", "calls": [{"service": "user", "class_name": "User", "function_name": "find"}]},
     {"id": "vip", "calls": [{"service": "user", "class_name": "User", "function_name": "discount"}]},
     {"id": "retry", "calls": [{"service": "pay", "class_name": "Pay", "function_name": "charge"}]},
     {"id": "done", "calls": [{"service": "mail", "class_name": "Mail", "function_name": "send"}]}
   ],
   "edges": [["check", "vip"], ["check", "retry"], ["vip", "retry"], ["retry", "retry"], ["retry", "done"]]},
  {"service": "user", "class_name": "User", "function_name": "find"},
  {"service": "user", "class_name": "User", "function_name": "discount"},
  {"service": "pay", "class_name": "Pay", "function_name": "charge"},
  {"service": "mail", "class_name": "Mail", "function_name": "send"}
]}"#;

fn main() {
    let doc = parse_call_graph(GRAPH).expect("valid document");
    let graph = build_cscfg(&doc).expect("consistent graph");
    println!(
        "{} functions, {} blocks, {} flow edges",
        graph.functions().count(),
        graph.block_count(),
        graph.flow_edge_count()
    );
    let create = FunctionRef::new("order", "Order", "create");
    let info = graph.dominance(&create).unwrap();
    let blocks = ["check", "vip", "retry", "done"];
    let node = |b: &str| DomNode::Block(BlockId::new(b));
    println!("dominates (row over column):");
    for a in blocks {
        let row: Vec<&str> = blocks.iter().map(|b| if info.dominates(&node(a), &node(b)) { "x" } else { "." }).collect();
        println!("  {a:<6} {}", row.join(" "));
    }
    println!("post-dominates:");
    for a in blocks {
        let row: Vec<&str> = blocks.iter().map(|b| if info.post_dominates(&node(a), &node(b)) { "x" } else { "." }).collect();
        println!("  {a:<6} {}", row.join(" "));
    }
    for (i, class) in mutual_dominance_classes(&graph, &create).unwrap().iter().enumerate() {
        let names: Vec<&str> = class.iter().map(|b| b.as_str()).collect();
        println!("class {i}: {}", names.join(" "));
    }
}
