//! Samples traces, rebuilds them from the kept spans and compares the
//! result with the originals.

use spanscope::harness::{generate_system, generate_traces, SystemSpec};
use spanscope::pipeline::Pipeline;
use spanscope::reconstruct::{reconstruct, structural_fidelity, Origin};
use spanscope::sampler::SamplingConfig;

fn main() {
    let sys = generate_system(&SystemSpec { seed: 4, ..SystemSpec::default() }).unwrap();
    let traces = generate_traces(&sys, 600, &[]).unwrap();
    let graph = sys.graph().unwrap();
    let map = sys.map(&graph).unwrap();
    let mut pipe = Pipeline::new(&graph, &map, SamplingConfig::with_ratio(0.2)).unwrap();
    let outcomes: Vec<_> = traces.iter().map(|t| pipe.process(&t.trace).unwrap()).collect();
    let stats = pipe.scorer().snapshot();

    let (mut exact, mut err, mut measured) = (0, 0.0, 0);
    for (i, (t, o)) in traces.iter().zip(&outcomes).enumerate() {
        let keep = o.decision.kept_set();
        let kept: Vec<_> = t.trace.spans().iter().filter(|s| keep.contains(&s.span_id)).cloned().collect();
        let rebuilt = reconstruct(&o.decision, &kept, &graph, &map, &stats).unwrap();
        let f = structural_fidelity(&t.trace, &rebuilt, &map);
        exact += usize::from(f.structure_exact);
        if let Some(e) = f.duration_error {
            err += e;
            measured += 1;
        }
        if i == 0 {
            println!("{}: kept {} of {} spans", t.trace.trace_id(), kept.len(), t.trace.len());
            for s in &rebuilt.spans {
                let tag = if s.origin == Origin::Sampled { "kept" } else { "inferred" };
                let orig = t.trace.spans().iter().find(|o| o.operation == s.span.operation).map(|o| o.duration);
                println!(
                    "  {:<9} {:<14} start {:>7} dur {:>6} (an original span with this name: {:?})",
                    tag, s.span.operation, s.span.start_time, s.span.duration, orig
                );
            }
        }
    }
    println!(
        "{exact}/{} structures exact, mean duration error {:.3} over {measured} traces",
        traces.len(),
        err / measured.max(1) as f64
    );
}
