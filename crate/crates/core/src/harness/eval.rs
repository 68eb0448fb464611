//! Baseline samplers and end-to-end evaluation over generated traces.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_inclusive, GeneratedSystem, GeneratedTrace, HarnessError};
use crate::cscfg::FunctionRef;
use crate::mapping::SpanFunctionMap;
use crate::model::{SpanId, Trace};
use crate::pipeline::{Pipeline, StageTimings};
use crate::reconstruct::{reconstruct, structural_fidelity};
use crate::sampler::{score_trace, SamplingConfig, SamplingDecision};
use crate::scoring::{ScoreKey, Scorer, ScoringConfig, StatsSnapshot};

/// Ratio small enough that every set gets a budget of one.
pub const LSR_RATIO: f64 = 1e-9;
/// Max-Z a trace needs before the whole-trace baseline keeps it.
pub const WHOLE_TRACE_Z: f64 = 5.0;
/// Monte Carlo draws per function for the duration oracle.
pub const ORACLE_SAMPLES: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    UniformSpan,
    LatencyTopk,
    WholeTraceAnomaly,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::UniformSpan, Baseline::LatencyTopk, Baseline::WholeTraceAnomaly];

    pub fn name(&self) -> &'static str {
        match self {
            Baseline::UniformSpan => "uniform-span",
            Baseline::LatencyTopk => "latency-topk",
            Baseline::WholeTraceAnomaly => "whole-trace-anomaly",
        }
    }
}

/// Kept span ids per trace for one baseline at budget `p`.
pub fn run_baseline(which: Baseline, traces: &[Trace], map: &SpanFunctionMap, p: f64, seed: u64) -> Vec<BTreeSet<SpanId>> {
    let all = |t: &Trace| t.spans().iter().map(|s| s.span_id.clone()).collect::<BTreeSet<_>>();
    match which {
        Baseline::UniformSpan => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            traces
                .iter()
                .map(|t| {
                    t.spans()
                        .iter()
                        .filter(|_| rng.random::<f64>() < p)
                        .map(|s| s.span_id.clone())
                        .collect()
                })
                .collect()
        }
        Baseline::LatencyTopk => {
            let mut scorer = Scorer::new(ScoringConfig::default());
            traces
                .iter()
                .map(|t| {
                    let scores = score_trace(t, map, &mut scorer);
                    let k = ((p * t.len() as f64).floor() as usize).min(t.len());
                    let mut order: Vec<usize> = (0..t.len()).collect();
                    order.sort_by(|&a, &b| {
                        scores[b].z.value
                            .total_cmp(&scores[a].z.value)
                            .then_with(|| t.spans()[a].span_id.cmp(&t.spans()[b].span_id))
                    });
                    order[..k].iter().map(|&i| t.spans()[i].span_id.clone()).collect()
                })
                .collect()
        }
        Baseline::WholeTraceAnomaly => {
            let mut scorer = Scorer::new(ScoringConfig::default());
            let total: usize = traces.iter().map(Trace::len).sum();
            let budget = (p * total as f64).floor() as usize;
            let mut used = 0;
            traces
                .iter()
                .map(|t| {
                    let scores = score_trace(t, map, &mut scorer);
                    let max_z = scores.iter().map(|s| s.z.value).fold(f64::NEG_INFINITY, f64::max);
                    if p >= 1.0 || (max_z > WHOLE_TRACE_Z && used + t.len() <= budget) {
                        used += t.len();
                        all(t)
                    } else {
                        BTreeSet::new()
                    }
                })
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: String,
    pub traces: usize,
    pub mean_lsr: f64,
    pub mean_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerRow {
    pub sampler: String,
    pub kept_ratio: f64,
    pub coverage: Option<f64>,
    pub latency_coverage: Option<f64>,
    pub structural_coverage: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub trace_id: String,
    pub spans: usize,
    pub dss: usize,
    pub lsr_kept: usize,
    pub kept: usize,
    pub structure_exact: bool,
}

/// Deterministic part of an evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub traces: usize,
    pub spans: usize,
    pub target_ratio: f64,
    pub sampling_ratio: f64,
    pub lsr: f64,
    /// Absent when no span was perturbed.
    pub faulty_span_coverage: Option<f64>,
    pub structure_exact_rate: f64,
    pub reconstruct_failures: usize,
    pub mean_duration_error: Option<f64>,
    /// Expected error of filling each inferred span with its historical mean.
    pub duration_bound: Option<f64>,
    pub buckets: Vec<BucketRow>,
    pub samplers: Vec<SamplerRow>,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub timings: StageTimings,
    pub decisions: Vec<SamplingDecision>,
    pub rows: Vec<TraceRow>,
    pub stats: StatsSnapshot,
}

pub const BUCKETS: [(&str, usize, usize); 4] = [("1-10", 1, 10), ("11-20", 11, 20), ("21-30", 21, 30), ("30+", 31, usize::MAX)];

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn coverage(traces: &[GeneratedTrace], kept: &[BTreeSet<SpanId>], only: Option<bool>) -> Option<f64> {
    let mut hit = 0;
    let mut total = 0;
    for (t, k) in traces.iter().zip(kept) {
        for (id, p) in &t.faulty {
            if only.is_some_and(|latency| latency != p.base_exclusive.is_some()) {
                continue;
            }
            total += 1;
            hit += usize::from(k.contains(id));
        }
    }
    (total > 0).then(|| ratio(hit, total))
}

fn sampler_row(name: &str, traces: &[GeneratedTrace], kept: &[BTreeSet<SpanId>]) -> SamplerRow {
    let spans: usize = traces.iter().map(|t| t.trace.len()).sum();
    SamplerRow {
        sampler: name.to_string(),
        kept_ratio: ratio(kept.iter().map(BTreeSet::len).sum(), spans),
        coverage: coverage(traces, kept, None),
        latency_coverage: coverage(traces, kept, Some(true)),
        structural_coverage: coverage(traces, kept, Some(false)),
    }
}

/// Mean relative error of filling `f` with `fill`, over unfaulted draws.
pub fn duration_oracle(system: &GeneratedSystem, f: &FunctionRef, fill: f64, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for _ in 0..samples {
        let x = sample_inclusive(system, f, &mut rng) as f64;
        sum += (x - fill).abs() / x.max(1.0);
    }
    sum / samples.max(1) as f64
}

/// Runs the sampler, the LSR pass, reconstruction and the baselines.
pub fn evaluate(system: &GeneratedSystem, traces: &[GeneratedTrace], cfg: &SamplingConfig, workers: usize) -> Result<EvalOutcome, HarnessError> {
    let graph = system.graph()?;
    let map = system.map(&graph)?;
    let plain: Vec<Trace> = traces.iter().map(|t| t.trace.clone()).collect();

    let mut main = Pipeline::new(&graph, &map, cfg.clone()).map_err(crate::pipeline::PipelineError::from)?;
    let outcomes = main.process_batch(&plain, workers);
    let timings = main.timings();
    let mut lsr_pipe = Pipeline::new(&graph, &map, SamplingConfig { ratio: LSR_RATIO, ..cfg.clone() })
        .map_err(crate::pipeline::PipelineError::from)?;
    let lsr_outcomes = lsr_pipe.process_batch(&plain, workers);
    let stats = main.scorer().snapshot();

    let mut decisions = Vec::with_capacity(traces.len());
    let mut lsr_kept = Vec::with_capacity(traces.len());
    for (o, l) in outcomes.into_iter().zip(lsr_outcomes) {
        let o = o?;
        let l = l?;
        decisions.push(o.decision);
        lsr_kept.push((o.dss.len(), l.decision.kept.len()));
    }

    let mut rows = Vec::with_capacity(traces.len());
    let mut exact = 0;
    let mut failures = 0;
    let mut errors: Vec<f64> = Vec::new();
    let mut bounds: Vec<f64> = Vec::new();
    let mut oracle: BTreeMap<FunctionRef, f64> = BTreeMap::new();
    for ((t, d), (dss, lsr)) in traces.iter().zip(&decisions).zip(&lsr_kept) {
        let keep: BTreeSet<&SpanId> = d.kept.iter().collect();
        let kept_spans: Vec<_> = t.trace.spans().iter().filter(|s| keep.contains(&s.span_id)).cloned().collect();
        let mut structure_exact = false;
        match reconstruct(d, &kept_spans, &graph, &map, &stats) {
            Ok(r) => {
                let fid = structural_fidelity(&t.trace, &r, &map);
                structure_exact = fid.structure_exact;
                if fid.structure_exact {
                    exact += 1;
                    let n = fid.inferred;
                    if let (Some(e), true) = (fid.duration_error, n > 0) {
                        errors.push(e);
                        let mut b = 0.0;
                        for s in r.inferred() {
                            let f = map.resolve(&s.span).function().cloned().expect("inferred spans are mapped");
                            let fill = stats.duration(&ScoreKey::Function(f.clone())).map_or(0.0, |m| m.0);
                            let seed = system.spec.seed ^ oracle.len() as u64;
                            b += *oracle
                                .entry(f.clone())
                                .or_insert_with(|| duration_oracle(system, &f, fill, ORACLE_SAMPLES, seed));
                        }
                        bounds.push(b / n as f64);
                    }
                }
            }
            Err(e) => {
                log::debug!("{}: {e}", t.trace.trace_id());
                failures += 1;
            }
        }
        rows.push(TraceRow {
            trace_id: t.trace.trace_id().to_string(),
            spans: t.trace.len(),
            dss: *dss,
            lsr_kept: *lsr,
            kept: d.kept.len(),
            structure_exact,
        });
    }

    let spans: usize = rows.iter().map(|r| r.spans).sum();
    let buckets = BUCKETS
        .iter()
        .map(|(name, lo, hi)| {
            let in_bucket: Vec<&TraceRow> = rows.iter().filter(|r| (*lo..=*hi).contains(&r.spans)).collect();
            let mean = |f: &dyn Fn(&TraceRow) -> f64| {
                if in_bucket.is_empty() {
                    0.0
                } else {
                    in_bucket.iter().map(|r| f(r)).sum::<f64>() / in_bucket.len() as f64
                }
            };
            BucketRow {
                bucket: name.to_string(),
                traces: in_bucket.len(),
                mean_lsr: mean(&|r| ratio(r.lsr_kept, r.spans)),
                mean_ratio: mean(&|r| ratio(r.kept, r.spans)),
            }
        })
        .collect();

    let kept: Vec<BTreeSet<SpanId>> = decisions.iter().map(|d| d.kept.iter().cloned().collect()).collect();
    let mut samplers = vec![sampler_row("spanscope", traces, &kept)];
    for b in Baseline::ALL {
        let k = run_baseline(b, &plain, &map, cfg.ratio, system.spec.seed);
        samplers.push(sampler_row(b.name(), traces, &k));
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let report = EvalReport {
        traces: traces.len(),
        spans,
        target_ratio: cfg.ratio,
        sampling_ratio: ratio(rows.iter().map(|r| r.kept).sum(), spans),
        lsr: ratio(rows.iter().map(|r| r.lsr_kept).sum(), spans),
        faulty_span_coverage: samplers[0].coverage,
        structure_exact_rate: ratio(exact, traces.len()),
        reconstruct_failures: failures,
        mean_duration_error: mean(&errors),
        duration_bound: mean(&bounds),
        buckets,
        samplers,
    };
    Ok(EvalOutcome {
        report,
        timings,
        decisions,
        rows,
        stats,
    })
}

/// Writes `buckets.csv`, `samplers.csv` and `report.json` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("buckets.csv"))?;
    for row in &report.buckets {
        w.serialize(row)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("samplers.csv"))?;
    for row in &report.samplers {
        w.serialize(row)?;
    }
    w.flush()?;
    let json = serde_json::to_string_pretty(report).map_err(io::Error::other)?;
    std::fs::write(dir.join("report.json"), json + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{default_faults, generate_system, generate_traces, SystemSpec, DEFAULT_FAULT_FRACTION};

    fn setup(n: usize) -> (GeneratedSystem, Vec<GeneratedTrace>) {
        let sys = generate_system(&SystemSpec::default()).unwrap();
        let faults = default_faults(&sys, n, DEFAULT_FAULT_FRACTION);
        let traces = generate_traces(&sys, n, &faults).unwrap();
        (sys, traces)
    }

    #[test]
    fn full_budget_keeps_everything() {
        let (sys, traces) = setup(50);
        let g = sys.graph().unwrap();
        let map = sys.map(&g).unwrap();
        let plain: Vec<Trace> = traces.iter().map(|t| t.trace.clone()).collect();
        for b in Baseline::ALL {
            let kept = run_baseline(b, &plain, &map, 1.0, 9);
            for (t, k) in plain.iter().zip(&kept) {
                assert_eq!(k.len(), t.len(), "{}", b.name());
            }
        }
    }

    #[test]
    fn uniform_rate_concentrates() {
        let (sys, traces) = setup(1500);
        let g = sys.graph().unwrap();
        let map = sys.map(&g).unwrap();
        let plain: Vec<Trace> = traces.iter().map(|t| t.trace.clone()).collect();
        let total: usize = plain.iter().map(Trace::len).sum();
        assert!(total >= 10_000);
        let kept: usize = run_baseline(Baseline::UniformSpan, &plain, &map, 0.15, 4).iter().map(BTreeSet::len).sum();
        assert!((ratio(kept, total) - 0.15).abs() <= 0.02);
    }

    #[test]
    fn no_faults_means_no_coverage() {
        let sys = generate_system(&SystemSpec::default()).unwrap();
        let traces = generate_traces(&sys, 40, &[]).unwrap();
        let out = evaluate(&sys, &traces, &SamplingConfig::with_ratio(0.3), 1).unwrap();
        assert_eq!(out.report.faulty_span_coverage, None);
        assert!(out.report.samplers.iter().all(|s| s.coverage.is_none()));
    }

    #[test]
    fn report_is_reproducible() {
        let (sys, traces) = setup(300);
        let cfg = SamplingConfig::with_ratio(0.3);
        let a = evaluate(&sys, &traces, &cfg, 1).unwrap();
        let b = evaluate(&sys, &traces, &cfg, 3).unwrap();
        assert_eq!(a.report, b.report);
        let dir = tempfile::tempdir().unwrap();
        write_report(&a.report, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("buckets.csv")).unwrap();
        assert!(csv.starts_with("bucket,traces,mean_lsr,mean_ratio\n"));
    }
}
