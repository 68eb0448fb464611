//! Budget allocation across span sets, then a full sampling pass at a few
//! target ratios.

use spanscope::harness::eval::LSR_RATIO;
use spanscope::harness::{generate_system, generate_traces, SystemSpec};
use spanscope::pipeline::Pipeline;
use spanscope::sampler::{allocate_budget, SamplingConfig};

fn main() {
    let sizes = [1, 3, 8, 20];
    for p in [0.01, 0.2, 0.5, 1.0] {
        println!("sizes {sizes:?} at p {p}: budgets {:?}", allocate_budget(&sizes, p).unwrap());
    }

    let sys = generate_system(&SystemSpec::default()).unwrap();
    let traces = generate_traces(&sys, 1000, &[]).unwrap();
    let graph = sys.graph().unwrap();
    let map = sys.map(&graph).unwrap();
    for p in [LSR_RATIO, 0.3, 0.6] {
        let mut pipe = Pipeline::new(&graph, &map, SamplingConfig::with_ratio(p)).unwrap();
        let (mut kept, mut total, mut by_z) = (0, 0, 0);
        for t in &traces {
            let o = pipe.process(&t.trace).unwrap();
            kept += o.decision.kept.len();
            total += t.trace.len();
            by_z += o.decision.dss.iter().map(|d| d.picked_by_z).sum::<usize>();
        }
        println!("target {p:<6} kept {kept}/{total} ({:.3}), {by_z} chosen by z", kept as f64 / total as f64);
    }

    let mut pipe = Pipeline::new(&graph, &map, SamplingConfig::with_ratio(0.3)).unwrap();
    let o = pipe.process(&traces[0].trace).unwrap();
    println!("{}", serde_json::to_string_pretty(&o.decision).unwrap());
}
