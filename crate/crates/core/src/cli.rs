//! Command-line front end: `build-graph`, `sample`, `reconstruct`, `eval`
//! and `stats-export`.
//!
//! Settings come from flags, then the `--config` TOML file, then defaults.
//! Exit status is 0 on success, 1 for bad input or a failed stage and 2 for
//! configuration errors.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Deserialize;

use crate::align::AlignError;
use crate::cscfg::{build_cscfg, parse_call_graph, Cscfg, CscfgArtifact};
use crate::harness::eval::{evaluate, write_report, LSR_RATIO};
use crate::harness::{default_faults, generate_system, generate_traces, FaultSpec, SystemSpec, DEFAULT_FAULT_FRACTION};
use crate::mapping::{build_map, parse_shared_dictionary, SpanFunctionMap};
use crate::model::{read_traces, serialize_trace, IngestOptions, Span, Trace, TraceRecord};
use crate::pipeline::{Pipeline, PipelineError, StageTimings};
use crate::reconstruct::{reconstruct, structural_fidelity};
use crate::sampler::{SamplingConfig, SamplingDecision};
use crate::scoring::StatsSnapshot;

const BATCH: usize = 256;
const DEFAULT_EVAL_TRACES: usize = 5000;
/// Offset above the lowest ratio used by `eval` when no ratio is set.
const EVAL_RATIO_OFFSET: f64 = 0.05;

#[derive(Parser, Debug)]
#[command(name = "spanscope", version, about = "Span-level trace sampling guided by call-site control flow graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Freeze a call-graph document into a graph artifact.
    BuildGraph(BuildGraphArgs),
    /// Sample spans from a trace file.
    Sample(SampleArgs),
    /// Rebuild traces from sampled spans.
    Reconstruct(ReconstructArgs),
    /// Run the synthetic evaluation.
    Eval(EvalArgs),
    /// Export per-function statistics.
    StatsExport(StatsArgs),
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct SamplingArgs {
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Quantile of the Z history used as the anomaly threshold.
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BuildGraphArgs {
    /// Call-graph document (JSON).
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Traces whose observed calls are patched into the graph.
    #[arg(long)]
    pub patch: Option<PathBuf>,
    #[arg(long)]
    pub shared_dict: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Graph artifact or call-graph document.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Newline-delimited trace records.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[arg(long)]
    pub shared_dict: Option<PathBuf>,
    /// Also write the aligned execution path of every trace.
    #[arg(long)]
    pub dump_alignment: bool,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Kept spans as trace records, as written by `sample`.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[arg(long)]
    pub decisions: Option<PathBuf>,
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Unsampled traces; when given a fidelity report is written.
    #[arg(long)]
    pub original: Option<PathBuf>,
    #[arg(long)]
    pub shared_dict: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of generated traces.
    #[arg(long)]
    pub n: Option<usize>,
    /// Also write the generated call graph, dictionary and traces.
    #[arg(long)]
    pub dump_workload: bool,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Existing snapshot to convert instead of scoring traces.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    pub shared_dict: Option<PathBuf>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Marks errors that exit with status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(ConfigError(msg.into()))
}

// ---------------------------------------------------------------------------
// configuration file

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub paths: PathsFile,
    pub sampling: SamplingFile,
    pub system: Option<SystemSpec>,
    pub eval: EvalFile,
    pub workers: Option<usize>,
    pub log: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsFile {
    pub graph: Option<PathBuf>,
    pub traces: Option<PathBuf>,
    pub shared_dict: Option<PathBuf>,
    pub stats: Option<PathBuf>,
    pub decisions: Option<PathBuf>,
    pub original: Option<PathBuf>,
    pub patch: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingFile {
    pub ratio: Option<f64>,
    pub theta_quantile: Option<f64>,
    pub theta_override: Option<f64>,
    pub window: Option<usize>,
    pub min_obs: Option<u64>,
    pub lrs_horizon: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalFile {
    pub traces: Option<usize>,
    pub fault_fraction: Option<f64>,
    pub faults: Option<Vec<FaultSpec>>,
}

pub fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| config_err(format!("invalid config {}: {e}", path.display())))
}

/// Resolved settings of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub graph: Option<PathBuf>,
    pub traces: Option<PathBuf>,
    pub shared_dict: Option<PathBuf>,
    pub stats: Option<PathBuf>,
    pub decisions: Option<PathBuf>,
    pub original: Option<PathBuf>,
    pub patch: Option<PathBuf>,
    pub out: PathBuf,
    pub sampling: SamplingConfig,
    /// Whether the ratio came from a flag or the file.
    pub ratio_set: bool,
    pub system: SystemSpec,
    pub eval_traces: usize,
    pub fault_fraction: f64,
    pub faults: Option<Vec<FaultSpec>>,
    pub workers: usize,
}

fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

impl RunConfig {
    fn resolve(file: FileConfig, common: &CommonArgs, sampling: Option<&SamplingArgs>) -> Result<Self> {
        let flags = sampling.map(|s| (s.ratio, s.theta, s.window)).unwrap_or_default();
        let mut cfg = SamplingConfig::default();
        let ratio = pick(flags.0, file.sampling.ratio);
        if let Some(r) = ratio {
            cfg.ratio = r;
        }
        if let Some(t) = pick(flags.1, file.sampling.theta_quantile) {
            cfg.theta_quantile = t;
        }
        if let Some(w) = pick(flags.2, file.sampling.window) {
            cfg.window = w;
        }
        cfg.theta_override = file.sampling.theta_override;
        if let Some(m) = file.sampling.min_obs {
            cfg.min_obs = m;
        }
        if let Some(h) = file.sampling.lrs_horizon {
            cfg.lrs_horizon = h;
        }
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        let workers = pick(common.workers, file.workers).unwrap_or(1);
        if workers == 0 {
            return Err(config_err("workers must be at least 1"));
        }
        let fault_fraction = file.eval.fault_fraction.unwrap_or(DEFAULT_FAULT_FRACTION);
        if !(0.0..=1.0).contains(&fault_fraction) {
            return Err(config_err("fault_fraction must be in [0, 1]"));
        }
        Ok(RunConfig {
            graph: file.paths.graph,
            traces: file.paths.traces,
            shared_dict: file.paths.shared_dict,
            stats: file.paths.stats,
            decisions: file.paths.decisions,
            original: file.paths.original,
            patch: file.paths.patch,
            out: pick(common.out.clone(), file.paths.out).unwrap_or_else(|| PathBuf::from("out")),
            sampling: cfg,
            ratio_set: ratio.is_some(),
            system: file.system.unwrap_or_default(),
            eval_traces: file.eval.traces.unwrap_or(DEFAULT_EVAL_TRACES),
            fault_fraction,
            faults: file.eval.faults,
            workers,
        })
    }
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    let p = path.as_deref().ok_or_else(|| config_err(format!("--{flag} is required")))?;
    if !p.exists() {
        bail!("{} does not exist", p.display());
    }
    Ok(p)
}

fn optional<'a>(path: &'a Option<PathBuf>) -> Result<Option<&'a Path>> {
    match path.as_deref() {
        Some(p) if !p.exists() => bail!("{} does not exist", p.display()),
        other => Ok(other),
    }
}

fn setup_logging(file_level: Option<&str>) {
    let env = env_logger::Env::new().filter_or("SPANSCOPE_LOG", file_level.unwrap_or("warn"));
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

// ---------------------------------------------------------------------------
// inputs and outputs

/// Loads either a frozen artifact or a call-graph document.
pub fn load_graph(path: &Path) -> Result<Cscfg> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("{} is not JSON", path.display()))?;
    if value.get("kind").is_some() {
        let art: CscfgArtifact = serde_json::from_value(value).with_context(|| format!("malformed artifact {}", path.display()))?;
        Ok(Cscfg::from_artifact(&art)?)
    } else {
        let doc = parse_call_graph(&text)?;
        Ok(build_cscfg(&doc)?)
    }
}

fn load_map(graph: &Cscfg, dict: Option<&Path>) -> Result<SpanFunctionMap> {
    let shared = match dict {
        Some(p) => parse_shared_dictionary(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => Vec::new(),
    };
    Ok(build_map(graph, &shared)?)
}

fn trace_reader(path: &Path) -> Result<impl Iterator<Item = Result<Trace>>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let name = path.display().to_string();
    Ok(read_traces(BufReader::new(file), IngestOptions::default())
        .enumerate()
        .map(move |(i, r)| r.with_context(|| format!("{name}: record {}", i + 1))))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}: line {}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn report_timings(t: &StageTimings) {
    eprintln!(
        "timings: align {:?}  partition {:?}  scoring {:?}  selection {:?}  per trace {:?}",
        t.align,
        t.partition,
        t.scoring,
        t.selection,
        t.per_trace()
    );
}

// ---------------------------------------------------------------------------
// commands

pub fn cmd_build_graph(args: &BuildGraphArgs) -> Result<()> {
    let file = load_config(args.common.config.as_deref())?;
    setup_logging(file.log.as_deref());
    let mut rc = RunConfig::resolve(file, &args.common, None)?;
    rc.graph = args.graph.clone().or(rc.graph);
    rc.patch = args.patch.clone().or(rc.patch);
    rc.shared_dict = args.shared_dict.clone().or(rc.shared_dict);
    let doc_path = required(&rc.graph, "graph")?;
    let patch = optional(&rc.patch)?;
    let dict = optional(&rc.shared_dict)?;

    let text = fs::read_to_string(doc_path).with_context(|| format!("reading {}", doc_path.display()))?;
    let doc = parse_call_graph(&text)?;
    let mut graph = build_cscfg(&doc)?;
    if let Some(p) = patch {
        let map = load_map(&graph, dict)?;
        let traces: Vec<Trace> = trace_reader(p)?.collect::<Result<_>>()?;
        let report = graph.patch_with_traces(&traces, &map);
        println!(
            "patch: {} pairs, {} edges added, {} blocks added",
            report.pairs_examined, report.added_edges, report.added_blocks
        );
        write_json(&rc.out, "patch.json", &report)?;
    }
    write_json(&rc.out, "cscfg.json", &graph.to_artifact())?;

    let mut summary = create(&rc.out, "dominance.txt")?;
    let mut classes = 0;
    for body in graph.functions() {
        let info = graph.dominance(&body.function)?;
        writeln!(summary, "{}  blocks {}  classes {}", body.function, body.blocks.len(), info.class_count())?;
        for c in 0..info.class_count() {
            let members: Vec<&str> = info.class_members(c).iter().map(|b| b.as_str()).collect();
            if members.is_empty() {
                continue;
            }
            writeln!(summary, "  class {c}: {}", members.join(" "))?;
        }
        classes += info.class_count();
    }
    summary.flush()?;
    println!(
        "graph: {} functions, {} blocks, {} flow edges, {} classes",
        graph.functions().count(),
        graph.block_count(),
        graph.flow_edge_count(),
        classes
    );
    Ok(())
}

pub fn cmd_sample(args: &SampleArgs) -> Result<()> {
    let file = load_config(args.common.config.as_deref())?;
    setup_logging(file.log.as_deref());
    let mut rc = RunConfig::resolve(file, &args.common, Some(&args.sampling))?;
    rc.graph = args.graph.clone().or(rc.graph);
    rc.traces = args.traces.clone().or(rc.traces);
    rc.shared_dict = args.shared_dict.clone().or(rc.shared_dict);
    let graph_path = required(&rc.graph, "graph")?;
    let traces_path = required(&rc.traces, "traces")?;
    let dict = optional(&rc.shared_dict)?;

    let graph = load_graph(graph_path)?;
    let map = load_map(&graph, dict)?;
    let mut pipeline = Pipeline::new(&graph, &map, rc.sampling.clone()).map_err(|e| config_err(e.to_string()))?;
    let mut decisions = create(&rc.out, "decisions.ndjson")?;
    let mut kept_out = create(&rc.out, "kept.ndjson")?;
    let mut alignment = if args.dump_alignment {
        Some(create(&rc.out, "alignment.txt")?)
    } else {
        None
    };
    let (mut traces, mut skipped, mut spans, mut kept) = (0usize, 0usize, 0usize, 0usize);
    let mut reader = trace_reader(traces_path)?.peekable();
    while reader.peek().is_some() {
        let batch: Vec<Trace> = reader.by_ref().take(BATCH).collect::<Result<_>>()?;
        let results = pipeline.process_batch(&batch, rc.workers);
        for (trace, result) in batch.iter().zip(results) {
            let outcome = match result {
                Ok(o) => o,
                Err(PipelineError::Align(e @ AlignError::NoPath { .. })) => {
                    warn!("skipping: {e}");
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e).with_context(|| format!("trace {}", trace.trace_id())),
            };
            traces += 1;
            spans += trace.len();
            kept += outcome.decision.kept.len();
            serde_json::to_writer(&mut decisions, &outcome.decision)?;
            writeln!(decisions)?;
            let keep = outcome.decision.kept_set();
            let record = TraceRecord {
                trace_id: trace.trace_id().to_string(),
                spans: trace.spans().iter().filter(|s| keep.contains(&s.span_id)).cloned().collect(),
            };
            serde_json::to_writer(&mut kept_out, &record)?;
            writeln!(kept_out)?;
            if let Some(w) = alignment.as_mut() {
                w.write_all(outcome.path.render(trace).as_bytes())?;
            }
        }
    }
    decisions.flush()?;
    kept_out.flush()?;
    if let Some(mut w) = alignment {
        w.flush()?;
    }
    write_json(&rc.out, "stats.json", &pipeline.scorer().snapshot())?;
    let inserts: Vec<_> = pipeline.alignment_inserts().cloned().collect();
    write_json(&rc.out, "alignment_inserts.json", &inserts)?;
    let ratio = if spans == 0 { 0.0 } else { kept as f64 / spans as f64 };
    println!("traces {traces}  skipped {skipped}  spans {spans}  kept {kept}  effective ratio {ratio:.4}");
    report_timings(&pipeline.timings());
    Ok(())
}

#[derive(serde::Serialize)]
struct FidelityRow {
    trace_id: String,
    structure_exact: bool,
    span_recall: f64,
    duration_error: Option<f64>,
    inferred: usize,
    error: Option<String>,
}

#[derive(serde::Serialize)]
struct FidelitySummary {
    traces: usize,
    failures: usize,
    structure_exact_rate: Option<f64>,
    mean_span_recall: Option<f64>,
    mean_duration_error: Option<f64>,
    rows: Vec<FidelityRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn cmd_reconstruct(args: &ReconstructArgs) -> Result<()> {
    let file = load_config(args.common.config.as_deref())?;
    setup_logging(file.log.as_deref());
    let mut rc = RunConfig::resolve(file, &args.common, None)?;
    rc.graph = args.graph.clone().or(rc.graph);
    rc.traces = args.traces.clone().or(rc.traces);
    rc.decisions = args.decisions.clone().or(rc.decisions);
    rc.stats = args.stats.clone().or(rc.stats);
    rc.original = args.original.clone().or(rc.original);
    rc.shared_dict = args.shared_dict.clone().or(rc.shared_dict);
    let graph_path = required(&rc.graph, "graph")?;
    let kept_path = required(&rc.traces, "traces")?;
    let decisions_path = required(&rc.decisions, "decisions")?;
    let stats_path = optional(&rc.stats)?;
    let original_path = optional(&rc.original)?;
    let dict = optional(&rc.shared_dict)?;

    let graph = load_graph(graph_path)?;
    let map = load_map(&graph, dict)?;
    let stats: StatsSnapshot = match stats_path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("malformed snapshot {}", p.display()))?,
        None => StatsSnapshot::empty(),
    };
    let decisions: Vec<SamplingDecision> = read_lines(decisions_path)?;
    let kept: HashMap<String, Vec<Span>> = read_lines::<TraceRecord>(kept_path)?
        .into_iter()
        .map(|r| (r.trace_id, r.spans))
        .collect();
    let originals: Option<HashMap<String, Trace>> = match original_path {
        Some(p) => Some(
            trace_reader(p)?
                .map(|t| t.map(|t| (t.trace_id().to_string(), t)))
                .collect::<Result<_>>()?,
        ),
        None => None,
    };

    let mut out = create(&rc.out, "reconstructed.ndjson")?;
    let mut rows = Vec::new();
    for d in &decisions {
        let spans = kept.get(&d.trace_id).map(Vec::as_slice).unwrap_or(&[]);
        let result = reconstruct(d, spans, &graph, &map, &stats);
        match &result {
            Ok(r) => {
                serde_json::to_writer(&mut out, r)?;
                writeln!(out)?;
            }
            Err(e) => warn!("trace {}: {e}", d.trace_id),
        }
        if let Some(orig) = originals.as_ref().and_then(|o| o.get(&d.trace_id)) {
            rows.push(match result {
                Ok(r) => {
                    let f = structural_fidelity(orig, &r, &map);
                    FidelityRow {
                        trace_id: d.trace_id.clone(),
                        structure_exact: f.structure_exact,
                        span_recall: f.span_recall,
                        duration_error: f.duration_error,
                        inferred: f.inferred,
                        error: None,
                    }
                }
                Err(e) => FidelityRow {
                    trace_id: d.trace_id.clone(),
                    structure_exact: false,
                    span_recall: 0.0,
                    duration_error: None,
                    inferred: 0,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    out.flush()?;
    if originals.is_some() {
        let summary = FidelitySummary {
            traces: rows.len(),
            failures: rows.iter().filter(|r| r.error.is_some()).count(),
            structure_exact_rate: mean(rows.iter().map(|r| f64::from(u8::from(r.structure_exact)))),
            mean_span_recall: mean(rows.iter().map(|r| r.span_recall)),
            mean_duration_error: mean(rows.iter().filter_map(|r| r.duration_error)),
            rows,
        };
        let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "traces {}  failures {}  structure exact {}  recall {}  duration error {}",
            summary.traces,
            summary.failures,
            fmt(summary.structure_exact_rate),
            fmt(summary.mean_span_recall),
            fmt(summary.mean_duration_error)
        );
        write_json(&rc.out, "fidelity.json", &summary)?;
    } else {
        println!("traces {}", decisions.len());
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let file = load_config(args.common.config.as_deref())?;
    setup_logging(file.log.as_deref());
    let mut rc = RunConfig::resolve(file, &args.common, Some(&args.sampling))?;
    if let Some(s) = args.seed {
        rc.system.seed = s;
    }
    if let Some(n) = args.n {
        rc.eval_traces = n;
    }
    let sys = generate_system(&rc.system).map_err(|e| config_err(e.to_string()))?;
    let n = rc.eval_traces;
    let faults = rc.faults.clone().unwrap_or_else(|| default_faults(&sys, n, rc.fault_fraction));
    let traces = generate_traces(&sys, n, &faults)?;
    info!("generated {n} traces over {} functions", sys.functions().count());
    if args.dump_workload {
        write_json(&rc.out, "callgraph.json", &sys.doc)?;
        let dict: Vec<_> = sys
            .shared
            .iter()
            .map(|f| crate::mapping::SharedEntry {
                class_name: f.class_name.clone(),
                function_name: f.function_name.clone(),
            })
            .collect();
        write_json(&rc.out, "shared.json", &dict)?;
        write_json(&rc.out, "faults.json", &faults)?;
        let mut w = create(&rc.out, "traces.ndjson")?;
        for t in &traces {
            writeln!(w, "{}", serialize_trace(&t.trace))?;
        }
        w.flush()?;
    }
    let mut cfg = rc.sampling.clone();
    if !rc.ratio_set {
        let mut probe_cfg = cfg.clone();
        probe_cfg.ratio = LSR_RATIO;
        let probe = evaluate(&sys, &traces, &probe_cfg, rc.workers)?;
        cfg.ratio = (probe.report.lsr + EVAL_RATIO_OFFSET).min(1.0);
        info!("lowest ratio {:.4}, sampling at {:.4}", probe.report.lsr, cfg.ratio);
    }
    let outcome = evaluate(&sys, &traces, &cfg, rc.workers)?;
    write_report(&outcome.report, &rc.out)?;
    let mut w = csv::Writer::from_path(rc.out.join("traces.csv"))?;
    for row in &outcome.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let r = &outcome.report;
    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "traces {}  spans {}  ratio {:.4}  lsr {:.4}  coverage {}  structure exact {:.4}  duration error {} (bound {})",
        r.traces,
        r.spans,
        r.sampling_ratio,
        r.lsr,
        fmt(r.faulty_span_coverage),
        r.structure_exact_rate,
        fmt(r.mean_duration_error),
        fmt(r.duration_bound)
    );
    for s in &r.samplers {
        println!("  {:<20} kept {:.4}  coverage {}", s.sampler, s.kept_ratio, fmt(s.coverage));
    }
    report_timings(&outcome.timings);
    Ok(())
}

pub fn cmd_stats_export(args: &StatsArgs) -> Result<()> {
    let file = load_config(args.common.config.as_deref())?;
    setup_logging(file.log.as_deref());
    let mut rc = RunConfig::resolve(file, &args.common, Some(&args.sampling))?;
    rc.graph = args.graph.clone().or(rc.graph);
    rc.traces = args.traces.clone().or(rc.traces);
    rc.stats = args.stats.clone().or(rc.stats);
    rc.shared_dict = args.shared_dict.clone().or(rc.shared_dict);
    let snapshot: StatsSnapshot = match optional(&rc.stats)? {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("malformed snapshot {}", p.display()))?,
        None => {
            let graph = load_graph(required(&rc.graph, "graph")?)?;
            let map = load_map(&graph, optional(&rc.shared_dict)?)?;
            let mut pipeline = Pipeline::new(&graph, &map, rc.sampling.clone()).map_err(|e| config_err(e.to_string()))?;
            for t in trace_reader(required(&rc.traces, "traces")?)? {
                let t = t?;
                match pipeline.process(&t) {
                    Ok(_) => {}
                    Err(PipelineError::Align(e)) => warn!("skipping: {e}"),
                    Err(e) => return Err(e).with_context(|| format!("trace {}", t.trace_id())),
                }
            }
            pipeline.scorer().snapshot()
        }
    };
    write_json(&rc.out, "stats.json", &snapshot)?;
    let mut w = csv::Writer::from_writer(create(&rc.out, "stats.csv")?);
    w.write_record(["key", "count", "median", "mad", "q_z", "duration_count", "duration_mean", "duration_std"])?;
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v}"));
    for k in &snapshot.keys {
        w.write_record([
            k.key.to_string(),
            k.count.to_string(),
            opt(k.median),
            opt(k.mad),
            opt(k.q_z),
            k.duration_count.to_string(),
            opt(k.duration_mean),
            opt(k.duration_std),
        ])?;
    }
    w.flush()?;
    println!("keys {}", snapshot.keys.len());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::BuildGraph(a) => cmd_build_graph(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Eval(a) => cmd_eval(a),
        Command::StatsExport(a) => cmd_stats_export(a),
    }
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        2
    } else {
        1
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit status.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_args(argv: &[&str]) -> SampleArgs {
        let mut full = vec!["spanscope", "sample"];
        full.extend(argv);
        match Cli::try_parse_from(full).unwrap().command {
            Command::Sample(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let file: FileConfig = toml::from_str("workers = 3\n[sampling]\nratio = 0.2\nwindow = 64\n").unwrap();
        let a = sample_args(&["--ratio", "0.5"]);
        let rc = RunConfig::resolve(file, &a.common, Some(&a.sampling)).unwrap();
        assert_eq!(rc.sampling.ratio, 0.5);
        assert_eq!(rc.sampling.window, 64);
        assert_eq!(rc.sampling.theta_quantile, SamplingConfig::default().theta_quantile);
        assert_eq!(rc.workers, 3);
        assert!(rc.ratio_set);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let a = sample_args(&["--theta", "1.5"]);
        let err = RunConfig::resolve(FileConfig::default(), &a.common, Some(&a.sampling)).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        fs::write(&cfg, "[sampling]\nratoi = 0.1\n").unwrap();
        assert_eq!(exit_code(&load_config(Some(&cfg)).unwrap_err()), 2);
    }

    #[test]
    fn missing_input_is_exit_one() {
        let a = sample_args(&["--graph", "/nonexistent/g.json", "--traces", "/nonexistent/t.ndjson"]);
        let err = cmd_sample(&a).unwrap_err();
        assert_eq!(exit_code(&err), 1);
        let a = sample_args(&[]);
        assert_eq!(exit_code(&cmd_sample(&a).unwrap_err()), 2);
    }

    #[test]
    fn dangling_callee_fails_build() {
        let dir = tempfile::tempdir().unwrap();
        let doc = dir.path().join("doc.json");
        fs::write(
            &doc,
            r#"{"schema_version":1,"functions":[{"service":"s","class_name":"A","function_name":"a","entry":"b0","exits":["b0"],
               "blocks":[{"id":"b0","calls":[{"service":"s","class_name":"B","function_name":"gone"}]}]}]}"#,
        )
        .unwrap();
        let out = dir.path().join("out");
        let cli = Cli::try_parse_from(["spanscope", "build-graph", "--graph", doc.to_str().unwrap(), "--out", out.to_str().unwrap()]).unwrap();
        let err = run(&cli).unwrap_err();
        assert_eq!(exit_code(&err), 1);
        assert!(format!("{err:#}").contains("gone"), "{err:#}");
    }
}
