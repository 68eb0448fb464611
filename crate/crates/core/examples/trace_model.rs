//! Reads NDJSON traces, walks the tree and shows how bad input is rejected.

use std::io::Cursor;

use spanscope::model::{read_traces, serialize_trace, IngestOptions};

const INPUT: &str = r#"{"trace_id":"t1","spans":[
{"span_id":"a","trace_id":"t1","parent_id":null,"operation":"Order.create","service":"order","start_time":0,"duration":100},
{"span_id":"b","trace_id":"t1","parent_id":"a","operation":"User.find","service":"user","start_time":10,"duration":30},
{"span_id":"c","trace_id":"t1","parent_id":"a","operation":"Pay.charge","service":"pay","start_time":50,"duration":40}]}
{"trace_id":"t2","spans":[{"span_id":"a","trace_id":"t2","parent_id":"missing","operation":"Order.create","service":"order","start_time":0,"duration":5}]}
{"trace_id":"t3","spans":[
{"span_id":"a","trace_id":"t3","parent_id":null,"operation":"Order.create","service":"order","start_time":0,"duration":10},
{"span_id":"b","trace_id":"t3","parent_id":"a","operation":"User.find","service":"user","start_time":8,"duration":4}]}
"#;

fn main() {
    // one trace per line
    let input: String = INPUT.replace("[\n", "[").replace(",\n{", ",{");
    for strict in [true, false] {
        let opts = IngestOptions { clock_skew_slack: if strict { 0 } else { 5 } };
        println!("clock skew slack {}:", opts.clock_skew_slack);
        for r in read_traces(Cursor::new(&input), opts) {
            match r {
                Ok(t) => {
                    println!("  {} with {} spans", t.trace_id(), t.len());
                    for &i in &t.preorder() {
                        let s = &t.spans()[i];
                        let own = t.exclusive_duration(&s.span_id).unwrap();
                        println!("    {:<14} total {:>4}  self {:>4}", s.operation, s.duration, own);
                    }
                }
                Err(e) => println!("  rejected: {e}"),
            }
        }
    }
    let first = read_traces(Cursor::new(&input), IngestOptions::default()).next().unwrap().unwrap();
    println!("round trip: {}", serialize_trace(&first));
}
