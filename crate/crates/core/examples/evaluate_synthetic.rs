//! Generates a synthetic system with faults, samples it just above the
//! lowest ratio and compares coverage with the baselines.

use spanscope::harness::eval::{evaluate, LSR_RATIO};
use spanscope::harness::{default_faults, generate_system, generate_traces, SystemSpec, DEFAULT_FAULT_FRACTION};
use spanscope::sampler::SamplingConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2000);
    let sys = generate_system(&SystemSpec::default())?;
    let faults = default_faults(&sys, n, DEFAULT_FAULT_FRACTION);
    let traces = generate_traces(&sys, n, &faults)?;

    let probe = evaluate(&sys, &traces, &SamplingConfig::with_ratio(LSR_RATIO), 1)?;
    let lsr = probe.report.lsr;
    let out = evaluate(&sys, &traces, &SamplingConfig::with_ratio(lsr + 0.05), 1)?;
    let r = &out.report;
    println!("traces {}  spans {}  lsr {:.4}  ratio {:.4}", r.traces, r.spans, r.lsr, r.sampling_ratio);
    println!("{:<20} {:>8} {:>9} {:>9} {:>11}", "sampler", "kept", "coverage", "latency", "structural");
    let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
    for s in &r.samplers {
        println!(
            "{:<20} {:>8.4} {:>9} {:>9} {:>11}",
            s.sampler,
            s.kept_ratio,
            f(s.coverage),
            f(s.latency_coverage),
            f(s.structural_coverage)
        );
    }
    println!("buckets:");
    for b in &r.buckets {
        println!("  {:<6} {:>5} traces  lsr {:.4}  ratio {:.4}", b.bucket, b.traces, b.mean_lsr, b.mean_ratio);
    }
    println!(
        "structure exact {:.4}  failures {}  duration error {}  bound {}",
        r.structure_exact_rate,
        r.reconstruct_failures,
        f(r.mean_duration_error),
        f(r.duration_bound)
    );
    let t = out.timings;
    println!(
        "per trace {:?}  align {:?}  partition {:?}  scoring {:?}  selection {:?}",
        t.per_trace(),
        t.align,
        t.partition,
        t.scoring,
        t.selection
    );
    Ok(())
}
