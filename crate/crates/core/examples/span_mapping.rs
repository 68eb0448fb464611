//! Resolves span operations to call-graph functions, including shared
//! library functions and spans that have no function form.

use spanscope::cscfg::{build_cscfg, parse_call_graph};
use spanscope::mapping::{build_map, parse_operation, parse_shared_dictionary, Resolution};

const GRAPH: &str = r#"{"schema_version": 1, "functions": [
  {"service": "order", "class_name": "Order", "function_name": "create", "entry": "b0", "exits": ["b0"],
   "blocks": [{"id": "b0", "calls": [
     {"service": "SHARED", "class_name": "Json", "function_name": "encode"},
     {"service": "user", "class_name": "User", "function_name": "find"}]}], "edges": []},
  {"service": "user", "class_name": "User", "function_name": "find"},
  {"service": "SHARED", "class_name": "Json", "function_name": "encode"}
]}"#;

const SHARED: &str = r#"[{"class_name": "Json", "function_name": "encode"},
                         {"class_name": "Log", "function_name": "write"}]"#;

fn main() {
    let graph = build_cscfg(&parse_call_graph(GRAPH).unwrap()).unwrap();
    let shared = parse_shared_dictionary(SHARED).unwrap();
    let map = build_map(&graph, &shared).unwrap();
    println!("{} services, {} shared functions", map.service_count(), map.shared_count());

    for op in ["OrderService.create(java.lang.String)", "List<Item>.get", "GET /orders/{id}", "noDot"] {
        println!("parse {op:?} -> {:?}", parse_operation(op));
    }
    let cases = [
        ("order", "Order.create"),
        ("user", "User.find(long)"),
        ("order", "Json.encode"),
        ("billing", "Log.write"),
        ("user", "User.delete"),
        ("billing", "Bill.open"),
        ("gateway", "POST /checkout"),
    ];
    for (service, op) in cases {
        let shown = match map.resolve_parts(service, op) {
            Resolution::Resolved(f) => format!("{f}"),
            Resolution::Unmapped(why) => format!("unmapped ({why})"),
        };
        println!("{service:>8} {op:<20} {shown}");
    }
}
