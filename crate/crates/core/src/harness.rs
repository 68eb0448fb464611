//! Synthetic microservice systems and trace streams with injected faults.
//!
//! A generated system is a call-graph document plus the ground truth needed
//! to drive it: branch weights per block, error-return branches and a
//! log-normal self-time model per function. Calls form a tree, so every
//! function has one call site; traces are random walks over that tree.

pub mod eval;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cscfg::{build_cscfg, BlockDoc, CallGraphDoc, Cscfg, FunctionDoc, FunctionRef, GraphError, SCHEMA_VERSION};
use crate::mapping::{build_map, MappingError, SpanFunctionMap};
use crate::model::{ModelError, Span, SpanId, Trace};
use crate::pipeline::PipelineError;

pub const URL_SERVICE: &str = "gateway";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid system spec: {0}")]
    InvalidSpec(String),
    #[error("fault target {0} is not in the system")]
    UnknownFaultTarget(String),
    #[error("fault target {0} has no error-return branch")]
    NoErrorBranch(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogNormalParams {
    pub mu: f64,
    pub sigma: f64,
}

impl LogNormalParams {
    pub fn mean(&self) -> f64 {
        (self.mu + self.sigma * self.sigma / 2.0).exp()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Archetype {
    #[default]
    Random,
    /// One order function whose trunk forks into a three-call comfort arm
    /// and a two-call economy arm.
    ComfortEconomy,
    /// Entry functions with one two-arm fork each and a trunk of leaf calls
    /// whose length grows from entry to entry, so every trace has two span
    /// sets whatever its size.
    Fanout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemSpec {
    pub seed: u64,
    pub archetype: Archetype,
    pub n_services: usize,
    pub n_functions_per_service: usize,
    pub entry_points: usize,
    /// Chance that a body segment is a two-arm fork rather than one block.
    pub branch_probability: f64,
    /// Chance that a function near the top gets an early error return.
    pub error_branch_probability: f64,
    pub max_call_depth: usize,
    pub shared_library_fraction: f64,
    /// Chance that a trace is wrapped in an unmappable URL span.
    pub url_span_probability: f64,
    /// Self-time model in microseconds; each function shifts `mu` a little.
    pub duration: LogNormalParams,
    /// Largest trunk of the fanout archetype.
    pub max_fanout: usize,
}

impl Default for SystemSpec {
    fn default() -> Self {
        SystemSpec {
            seed: 1,
            archetype: Archetype::Random,
            n_services: 4,
            n_functions_per_service: 8,
            entry_points: 3,
            branch_probability: 0.4,
            error_branch_probability: 0.3,
            max_call_depth: 4,
            shared_library_fraction: 0.1,
            url_span_probability: 0.3,
            duration: LogNormalParams {
                mu: 6.5,
                sigma: 0.25,
            },
            max_fanout: 40,
        }
    }
}

impl SystemSpec {
    pub fn comfort_economy(seed: u64) -> Self {
        SystemSpec {
            seed,
            archetype: Archetype::ComfortEconomy,
            url_span_probability: 0.0,
            ..SystemSpec::default()
        }
    }

    pub fn fanout(seed: u64) -> Self {
        SystemSpec {
            seed,
            archetype: Archetype::Fanout,
            entry_points: 6,
            url_span_probability: 0.0,
            ..SystemSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidSpec(m.to_string()));
        for (name, p) in [
            ("branch_probability", self.branch_probability),
            ("error_branch_probability", self.error_branch_probability),
            ("shared_library_fraction", self.shared_library_fraction),
            ("url_span_probability", self.url_span_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must be in [0, 1]"));
            }
        }
        if self.max_call_depth < 1 {
            return bad("max_call_depth must be at least 1");
        }
        if self.n_services == 0 || self.n_functions_per_service == 0 || self.entry_points == 0 {
            return bad("service, function and entry counts must be positive");
        }
        if !(self.duration.sigma >= 0.0 && self.duration.mu.is_finite()) {
            return bad("duration model needs finite mu and sigma >= 0");
        }
        Ok(())
    }
}

/// One way out of a block: to another block, or back to the caller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub to: Option<String>,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBranch {
    pub from: String,
    pub block: String,
    pub handler: FunctionRef,
}

/// Ground truth behind a generated graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BranchMap {
    pub transitions: BTreeMap<String, Vec<Transition>>,
    /// Error branches are never taken unless a structural fault forces them.
    pub error_branches: BTreeMap<FunctionRef, ErrorBranch>,
    pub durations: BTreeMap<FunctionRef, LogNormalParams>,
    pub entries: Vec<FunctionRef>,
}

#[derive(Clone, Debug)]
struct Body {
    entry: Option<String>,
    calls: HashMap<String, Vec<FunctionRef>>,
}

#[derive(Clone, Debug)]
pub struct GeneratedSystem {
    pub spec: SystemSpec,
    pub doc: CallGraphDoc,
    pub shared: Vec<FunctionRef>,
    pub truth: BranchMap,
    bodies: HashMap<FunctionRef, Body>,
    /// Caller and calling block of every called function.
    call_site: HashMap<FunctionRef, (FunctionRef, String)>,
}

impl GeneratedSystem {
    pub fn functions(&self) -> impl Iterator<Item = FunctionRef> + '_ {
        self.doc.functions.iter().map(FunctionDoc::function)
    }

    pub fn graph(&self) -> Result<Cscfg, HarnessError> {
        Ok(build_cscfg(&self.doc)?)
    }

    pub fn map(&self, graph: &Cscfg) -> Result<SpanFunctionMap, HarnessError> {
        Ok(build_map(graph, &self.shared)?)
    }

    pub fn contains(&self, f: &FunctionRef) -> bool {
        self.bodies.contains_key(f)
    }

    /// Call-site chain from an entry function down to `f`.
    fn chain(&self, f: &FunctionRef) -> (FunctionRef, HashMap<FunctionRef, String>) {
        let mut steer = HashMap::new();
        let mut cur = f.clone();
        while let Some((caller, block)) = self.call_site.get(&cur) {
            steer.insert(caller.clone(), block.clone());
            cur = caller.clone();
        }
        (cur, steer)
    }

    fn reaches(&self, from: &str, target: &str) -> bool {
        let mut seen: HashSet<&str> = HashSet::new();
        let mut queue = VecDeque::from([from]);
        while let Some(b) = queue.pop_front() {
            if b == target {
                return true;
            }
            if !seen.insert(b) {
                continue;
            }
            for t in self.truth.transitions.get(b).into_iter().flatten() {
                if let Some(to) = &t.to {
                    queue.push_back(to);
                }
            }
        }
        false
    }
}

// ---------------------------------------------------------------------------
// system generation

struct Skeleton {
    blocks: Vec<(String, usize)>,
    edges: Vec<(String, String)>,
    exits: Vec<String>,
    error: Option<String>,
}

fn skeleton(rng: &mut ChaCha8Rng, owner: &FunctionRef, spec: &SystemSpec, with_error: bool) -> Skeleton {
    let name = owner.operation();
    let mut blocks: Vec<(String, usize)> = Vec::new();
    let mut edges = Vec::new();
    let new_block = |blocks: &mut Vec<(String, usize)>, slots: usize| {
        let id = format!("{name}#b{}", blocks.len());
        blocks.push((id.clone(), slots));
        id
    };
    let b0 = new_block(&mut blocks, 1);
    let mut tails = vec![b0.clone()];
    let mut exits = Vec::new();
    let error = with_error.then(|| {
        let e = format!("{name}#err");
        edges.push((b0.clone(), e.clone()));
        exits.push(e.clone());
        e
    });
    for _ in 0..rng.random_range(1..=3) {
        if rng.random_bool(spec.branch_probability) {
            let optional = rng.random_bool(0.3);
            let mut heads = Vec::new();
            let mut next = Vec::new();
            for _ in 0..if optional { 1 } else { 2 } {
                let len = rng.random_range(1..=2);
                let head = new_block(&mut blocks, rng.random_range(1..=2));
                let mut last = head.clone();
                for _ in 1..len {
                    let b = new_block(&mut blocks, 1);
                    edges.push((last, b.clone()));
                    last = b;
                }
                heads.push(head);
                next.push(last);
            }
            for t in &tails {
                for h in &heads {
                    edges.push((t.clone(), h.clone()));
                }
            }
            if optional {
                next.extend(tails);
            }
            tails = next;
        } else {
            let h = new_block(&mut blocks, rng.random_range(1..=2));
            for t in &tails {
                edges.push((t.clone(), h.clone()));
            }
            tails = vec![h];
        }
    }
    exits.extend(tails);
    Skeleton {
        blocks,
        edges,
        exits,
        error,
    }
}

fn transitions_of(docs: &[FunctionDoc], errors: &BTreeMap<FunctionRef, ErrorBranch>) -> BTreeMap<String, Vec<Transition>> {
    let error_blocks: HashSet<&str> = errors.values().map(|e| e.block.as_str()).collect();
    let mut out: BTreeMap<String, Vec<Transition>> = BTreeMap::new();
    for f in docs {
        for b in &f.blocks {
            let mut ts: Vec<Transition> = f
                .edges
                .iter()
                .filter(|(a, _)| a == &b.id)
                .map(|(_, t)| Transition {
                    to: Some(t.clone()),
                    weight: if error_blocks.contains(t.as_str()) { 0.0 } else { 1.0 },
                })
                .collect();
            if f.exits.contains(&b.id) {
                ts.push(Transition { to: None, weight: 1.0 });
            }
            let total: f64 = ts.iter().map(|t| t.weight).sum();
            for t in &mut ts {
                t.weight /= total;
            }
            out.insert(b.id.clone(), ts);
        }
    }
    out
}

fn leaf(f: &FunctionRef) -> FunctionDoc {
    FunctionDoc {
        service: f.service.clone(),
        class_name: f.class_name.clone(),
        function_name: f.function_name.clone(),
        entry: None,
        exits: Vec::new(),
        blocks: Vec::new(),
        edges: Vec::new(),
    }
}

fn comfort_economy() -> (Vec<FunctionDoc>, Vec<FunctionRef>) {
    let f = |name: &str| FunctionRef::new("preserve", "Preserve", name);
    let root = f("preserve");
    let block = |id: &str, call: &str| BlockDoc {
        id: id.to_string(),
        calls: vec![f(call)],
    };
    let mut docs = vec![FunctionDoc {
        service: root.service.clone(),
        class_name: root.class_name.clone(),
        function_name: root.function_name.clone(),
        entry: Some("start".into()),
        exits: vec!["comfort3".into(), "economy2".into()],
        blocks: vec![
            block("start", "createOrder"),
            block("comfort1", "getComfortClass"),
            block("comfort2", "dispatchComfort"),
            block("comfort3", "getPrice"),
            block("economy1", "getEconomyClass"),
            block("economy2", "dispatchEconomy"),
        ],
        edges: [
            ("start", "comfort1"),
            ("comfort1", "comfort2"),
            ("comfort2", "comfort3"),
            ("start", "economy1"),
            ("economy1", "economy2"),
        ]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect(),
    }];
    for name in ["createOrder", "getComfortClass", "dispatchComfort", "getPrice", "getEconomyClass", "dispatchEconomy"] {
        docs.push(leaf(&f(name)));
    }
    (docs, vec![root])
}

fn fanout(spec: &SystemSpec) -> (Vec<FunctionDoc>, Vec<FunctionRef>) {
    let n = spec.entry_points;
    let mut docs = Vec::new();
    let mut entries = Vec::new();
    for e in 0..n {
        let service = format!("fan{e}");
        let class = format!("Fan{e}");
        let f = |name: String| FunctionRef::new(service.clone(), class.clone(), name);
        let trunk = if n == 1 {
            spec.max_fanout
        } else {
            2 + (spec.max_fanout.saturating_sub(2) * e) / (n - 1)
        };
        let entry = f("handle".into());
        let leaves: Vec<FunctionRef> = (0..trunk).map(|i| f(format!("step{i}"))).collect();
        let (head, tail) = leaves.split_at(trunk / 2);
        let (left, right) = (f("left".into()), f("right".into()));
        let blocks = vec![
            BlockDoc { id: format!("{class}#head"), calls: head.to_vec() },
            BlockDoc { id: format!("{class}#left"), calls: vec![left.clone()] },
            BlockDoc { id: format!("{class}#right"), calls: vec![right.clone()] },
            BlockDoc { id: format!("{class}#tail"), calls: tail.to_vec() },
        ];
        let edges = [("head", "left"), ("head", "right"), ("left", "tail"), ("right", "tail")]
            .iter()
            .map(|(a, b)| (format!("{class}#{a}"), format!("{class}#{b}")))
            .collect();
        docs.push(FunctionDoc {
            service: entry.service.clone(),
            class_name: entry.class_name.clone(),
            function_name: entry.function_name.clone(),
            entry: Some(format!("{class}#head")),
            exits: vec![format!("{class}#tail")],
            blocks,
            edges,
        });
        for l in leaves.iter().chain([&left, &right]) {
            docs.push(leaf(l));
        }
        entries.push(entry);
    }
    (docs, entries)
}

fn random_system(rng: &mut ChaCha8Rng, spec: &SystemSpec) -> (Vec<FunctionDoc>, Vec<FunctionRef>, Vec<FunctionRef>, BTreeMap<FunctionRef, ErrorBranch>) {
    let mut pool: VecDeque<FunctionRef> = VecDeque::new();
    for i in 0..spec.n_functions_per_service {
        for s in 0..spec.n_services {
            pool.push_back(FunctionRef::new(format!("svc{s}"), format!("Svc{s}"), format!("op{i}")));
        }
    }
    let total = pool.len();
    let n_shared = ((total as f64) * spec.shared_library_fraction).round() as usize;
    let shared: Vec<FunctionRef> = (0..n_shared).map(|i| FunctionRef::shared("Util", format!("helper{i}"))).collect();
    let n_entries = spec.entry_points.min(total);
    let entries: Vec<FunctionRef> = (0..n_entries).filter_map(|_| pool.pop_front()).collect();

    let mut docs: Vec<FunctionDoc> = Vec::new();
    let mut errors: BTreeMap<FunctionRef, ErrorBranch> = BTreeMap::new();
    let mut queue: VecDeque<(FunctionRef, usize)> = entries.iter().map(|e| (e.clone(), 0)).collect();
    while let Some((f, depth)) = queue.pop_front() {
        if depth + 1 >= spec.max_call_depth || pool.is_empty() {
            docs.push(leaf(&f));
            continue;
        }
        let with_error = depth <= 1 && rng.random_bool(spec.error_branch_probability);
        let sk = skeleton(rng, &f, spec, with_error);
        let mut blocks = Vec::new();
        for (id, slots) in &sk.blocks {
            let calls: Vec<FunctionRef> = (0..*slots).filter_map(|_| pool.pop_front()).collect();
            for c in &calls {
                queue.push_back((c.clone(), depth + 1));
            }
            blocks.push(BlockDoc { id: id.clone(), calls });
        }
        if let Some(err) = &sk.error {
            let handler = FunctionRef::new(f.service.clone(), f.class_name.clone(), format!("reject_{}", f.function_name));
            docs.push(leaf(&handler));
            blocks.push(BlockDoc {
                id: err.clone(),
                calls: vec![handler.clone()],
            });
            errors.insert(
                f.clone(),
                ErrorBranch {
                    from: sk.blocks[0].0.clone(),
                    block: err.clone(),
                    handler,
                },
            );
        }
        docs.push(FunctionDoc {
            service: f.service.clone(),
            class_name: f.class_name.clone(),
            function_name: f.function_name.clone(),
            entry: Some(sk.blocks[0].0.clone()),
            exits: sk.exits,
            blocks,
            edges: sk.edges,
        });
    }
    // each shared helper gets one call site in some body
    let with_body: Vec<usize> = (0..docs.len()).filter(|&i| !docs[i].blocks.is_empty()).collect();
    for s in &shared {
        docs.push(leaf(s));
        if with_body.is_empty() {
            continue;
        }
        let d = with_body[rng.random_range(0..with_body.len())];
        let candidates: Vec<usize> = (0..docs[d].blocks.len())
            .filter(|&b| !docs[d].blocks[b].id.ends_with("#err"))
            .collect();
        let b = candidates[rng.random_range(0..candidates.len())];
        docs[d].blocks[b].calls.push(s.clone());
    }
    (docs, entries, shared, errors)
}

/// Builds a system; the same spec always yields the same document.
pub fn generate_system(spec: &SystemSpec) -> Result<GeneratedSystem, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut docs, entries, shared, errors) = match spec.archetype {
        Archetype::ComfortEconomy => {
            let (d, e) = comfort_economy();
            (d, e, Vec::new(), BTreeMap::new())
        }
        Archetype::Fanout => {
            let (d, e) = fanout(spec);
            (d, e, Vec::new(), BTreeMap::new())
        }
        Archetype::Random => random_system(&mut rng, spec),
    };
    docs.sort_by_key(FunctionDoc::function);
    let mut durations = BTreeMap::new();
    for d in &docs {
        let shift = rng.random_range(-0.5..0.5);
        durations.insert(
            d.function(),
            LogNormalParams {
                mu: spec.duration.mu + shift,
                sigma: spec.duration.sigma,
            },
        );
    }
    let mut bodies = HashMap::new();
    let mut call_site = HashMap::new();
    for d in &docs {
        let f = d.function();
        let mut calls = HashMap::new();
        for b in &d.blocks {
            for c in &b.calls {
                call_site.insert(c.clone(), (f.clone(), b.id.clone()));
            }
            calls.insert(b.id.clone(), b.calls.clone());
        }
        bodies.insert(
            f,
            Body {
                entry: d.entry.clone().or_else(|| d.blocks.first().map(|b| b.id.clone())),
                calls,
            },
        );
    }
    let truth = BranchMap {
        transitions: transitions_of(&docs, &errors),
        error_branches: errors,
        durations,
        entries,
    };
    Ok(GeneratedSystem {
        spec: spec.clone(),
        doc: CallGraphDoc {
            schema_version: SCHEMA_VERSION,
            functions: docs,
            external: Vec::new(),
        },
        shared,
        truth,
        bodies,
        call_site,
    })
}

// ---------------------------------------------------------------------------
// faults and traces

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FaultKind {
    /// Multiplies the target's self time.
    Latency { factor: f64 },
    /// Forces the target's early error return.
    Structural,
}

/// A fault active for traces with index in `window_start..window_end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub target: FunctionRef,
    pub window_start: usize,
    pub window_end: usize,
}

impl FaultSpec {
    fn active(&self, i: usize) -> bool {
        (self.window_start..self.window_end).contains(&i)
    }
}

pub fn check_faults(system: &GeneratedSystem, faults: &[FaultSpec]) -> Result<(), HarnessError> {
    for f in faults {
        if !system.contains(&f.target) {
            return Err(HarnessError::UnknownFaultTarget(f.target.to_string()));
        }
        match f.kind {
            FaultKind::Latency { factor } if !(factor > 1.0) => {
                return Err(HarnessError::InvalidSpec(format!("latency factor {factor} must exceed 1")));
            }
            FaultKind::Structural if !system.truth.error_branches.contains_key(&f.target) => {
                return Err(HarnessError::NoErrorBranch(f.target.to_string()));
            }
            _ => {}
        }
    }
    Ok(())
}

pub const DEFAULT_FAULT_FRACTION: f64 = 0.04;

/// Two latency faults (x10) and up to two structural faults whose windows
/// together cover `fraction` of the traces, all after a warm-up fifth.
const PROBE_TRACES: usize = 400;
const LATENCY_CANDIDATES: usize = 4;

/// Fraction of fault-free traces that invoke each function.
pub fn reach_rates(system: &GeneratedSystem, probes: usize) -> HashMap<FunctionRef, f64> {
    let mut hits: HashMap<String, usize> = HashMap::new();
    for i in 0..probes {
        let Ok(t) = generate_trace(system, i, &[]) else { continue };
        let seen: HashSet<&str> = t.trace.spans().iter().map(|s| s.operation.as_str()).collect();
        for op in seen {
            *hits.entry(op.to_string()).or_default() += 1;
        }
    }
    system
        .functions()
        .map(|f| {
            let h = hits.get(&f.operation()).copied().unwrap_or(0);
            (f, h as f64 / probes.max(1) as f64)
        })
        .collect()
}

pub fn default_faults(system: &GeneratedSystem, n: usize, fraction: f64) -> Vec<FaultSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(system.spec.seed ^ 0xfa017);
    let entries: HashSet<&FunctionRef> = system.truth.entries.iter().collect();
    let handlers: HashSet<&FunctionRef> = system.truth.error_branches.values().map(|e| &e.handler).collect();
    let reach = reach_rates(system, PROBE_TRACES);
    let eligible: Vec<FunctionRef> = system
        .functions()
        .filter(|f| !entries.contains(f) && !handlers.contains(f) && !f.is_shared())
        .collect();
    // a latency fault hits only traces that reach the target on their own,
    // so prefer targets with a long history
    let rate = |f: &FunctionRef| reach.get(f).copied().unwrap_or(0.0);
    let mut latency = eligible;
    latency.sort_by(|a, b| rate(b).total_cmp(&rate(a)).then_with(|| a.cmp(b)));
    latency.truncate(LATENCY_CANDIDATES);
    let structural: Vec<FunctionRef> = system.truth.error_branches.keys().cloned().collect();
    let mut kinds: Vec<(FaultKind, FunctionRef)> = Vec::new();
    let pick = |from: &[FunctionRef], rng: &mut ChaCha8Rng, taken: &[(FaultKind, FunctionRef)]| {
        let free: Vec<&FunctionRef> = from.iter().filter(|f| !taken.iter().any(|(_, t)| t == *f)).collect();
        (!free.is_empty()).then(|| free[rng.random_range(0..free.len())].clone())
    };
    for _ in 0..2 {
        if let Some(t) = pick(&latency, &mut rng, &kinds) {
            kinds.push((FaultKind::Latency { factor: 10.0 }, t));
        }
    }
    for _ in 0..2 {
        if let Some(t) = pick(&structural, &mut rng, &kinds) {
            kinds.push((FaultKind::Structural, t));
        }
    }
    if kinds.is_empty() || n == 0 {
        return Vec::new();
    }
    let faulty = ((n as f64) * fraction).round() as usize;
    let per = (faulty / kinds.len()).max(1);
    let warmup = n / 5;
    let stride = (n - warmup) / kinds.len();
    kinds
        .into_iter()
        .enumerate()
        .map(|(k, (kind, target))| {
            let len = match kind {
                FaultKind::Latency { .. } => {
                    let r = reach.get(&target).copied().unwrap_or(1.0).max(1e-3);
                    ((per as f64 / r).ceil() as usize).min(stride.max(1))
                }
                FaultKind::Structural => per,
            };
            let start = warmup + k * stride + stride.saturating_sub(len) / 2;
            FaultSpec {
                kind,
                target,
                window_start: start,
                window_end: (start + len).min(n),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    /// Index into the fault list.
    pub fault: usize,
    /// Self time before a latency fault scaled it.
    pub base_exclusive: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedTrace {
    pub trace: Trace,
    pub entry: FunctionRef,
    /// Spans the generator perturbed, the ground truth for coverage.
    pub faulty: BTreeMap<SpanId, Perturbation>,
}

struct Walker<'s> {
    sys: &'s GeneratedSystem,
    rng: ChaCha8Rng,
    trace_id: String,
    spans: Vec<Span>,
    ids: HashSet<String>,
    fault: Option<(usize, &'s FaultSpec)>,
    steer: HashMap<FunctionRef, String>,
    faulty: BTreeMap<SpanId, Perturbation>,
}

fn self_time(rng: &mut ChaCha8Rng, p: &LogNormalParams) -> u64 {
    let d = LogNormal::new(p.mu, p.sigma).expect("valid log-normal");
    d.sample(rng).round().max(1.0) as u64
}

impl Walker<'_> {
    fn span_id(&mut self) -> SpanId {
        loop {
            let id = format!("{:016x}", self.rng.random::<u64>());
            if self.ids.insert(id.clone()) {
                return SpanId::new(id);
            }
        }
    }

    /// Blocks taken by one invocation of `f`.
    fn path(&mut self, f: &FunctionRef) -> Vec<String> {
        let sys = self.sys;
        let body = &sys.bodies[f];
        let Some(mut b) = body.entry.clone() else { return Vec::new() };
        let force_error = match self.fault {
            Some((_, spec)) if spec.kind == FaultKind::Structural && &spec.target == f => sys.truth.error_branches.get(f),
            _ => None,
        };
        let required = self.steer.get(f).cloned();
        let mut out = Vec::new();
        loop {
            out.push(b.clone());
            if let Some(err) = force_error.filter(|e| e.from == b) {
                out.push(err.block.clone());
                return out;
            }
            let ts = &sys.truth.transitions[&b];
            let mut options: Vec<&Transition> = ts.iter().filter(|t| t.weight > 0.0).collect();
            if let Some(r) = required.as_ref().filter(|r| !out.contains(r)) {
                let toward: Vec<&Transition> = options
                    .iter()
                    .copied()
                    .filter(|t| t.to.as_ref().is_some_and(|to| sys.reaches(to, r)))
                    .collect();
                if !toward.is_empty() {
                    options = toward;
                }
            }
            let total: f64 = options.iter().map(|t| t.weight).sum();
            let mut x = self.rng.random::<f64>() * total;
            let mut chosen = options.last().map(|t| t.to.clone()).unwrap_or(None);
            for t in &options {
                if x < t.weight {
                    chosen = t.to.clone();
                    break;
                }
                x -= t.weight;
            }
            match chosen {
                Some(next) if out.len() < 4096 => b = next,
                _ => return out,
            }
        }
    }

    /// Emits the span tree of one invocation and returns its end time.
    fn invoke(&mut self, f: &FunctionRef, parent: Option<SpanId>, start: u64, service: &str) -> u64 {
        let sys = self.sys;
        let id = self.span_id();
        let at = self.spans.len();
        let own_service = if f.is_shared() { service.to_string() } else { f.service.clone() };
        self.spans.push(Span {
            span_id: id.clone(),
            trace_id: self.trace_id.clone(),
            parent_id: parent,
            operation: f.operation(),
            service: own_service.clone(),
            start_time: start,
            duration: 0,
            attributes: BTreeMap::new(),
        });
        let blocks = self.path(f);
        let callees: Vec<FunctionRef> = blocks
            .iter()
            .flat_map(|b| sys.bodies[f].calls.get(b).cloned().unwrap_or_default())
            .collect();
        let mut x = self_time(&mut self.rng, &sys.truth.durations[f]);
        if let Some((k, spec)) = self.fault {
            match spec.kind {
                FaultKind::Latency { factor } if &spec.target == f => {
                    let base = x;
                    x = ((x as f64) * factor).round() as u64;
                    self.faulty.insert(
                        id.clone(),
                        Perturbation {
                            fault: k,
                            base_exclusive: Some(base),
                        },
                    );
                }
                FaultKind::Structural if sys.truth.error_branches.get(&spec.target).is_some_and(|e| &e.handler == f) => {
                    self.faulty.insert(
                        id.clone(),
                        Perturbation {
                            fault: k,
                            base_exclusive: None,
                        },
                    );
                }
                _ => {}
            }
        }
        // self time split into a lead gap, gaps between calls and a tail
        let k = callees.len() as u64;
        if x < k + 1 {
            x = k + 1;
            if let Some(p) = self.faulty.get_mut(&id) {
                p.base_exclusive = p.base_exclusive.map(|b| b.max(1));
            }
        }
        let gap = x / (k + 1);
        let mut cursor = start + gap;
        for c in &callees {
            cursor = self.invoke(c, Some(id.clone()), cursor, &own_service) + gap;
        }
        let end = cursor - gap + (x - gap * k);
        self.spans[at].duration = end - start;
        end
    }
}

fn trace_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1)))
}

/// Generates trace `index` of the stream.
pub fn generate_trace(system: &GeneratedSystem, index: usize, faults: &[FaultSpec]) -> Result<GeneratedTrace, HarnessError> {
    let mut rng = trace_rng(system.spec.seed, index);
    let fault = faults.iter().enumerate().find(|(_, f)| f.active(index));
    let (entry, steer) = match fault {
        Some((_, spec)) if spec.kind == FaultKind::Structural => system.chain(&spec.target),
        _ => {
            let e = &system.truth.entries;
            (e[rng.random_range(0..e.len())].clone(), HashMap::new())
        }
    };
    let url = rng.random_bool(system.spec.url_span_probability);
    let trace_id = format!("t{index:06}");
    let mut w = Walker {
        sys: system,
        rng,
        trace_id: trace_id.clone(),
        spans: Vec::new(),
        ids: HashSet::new(),
        fault,
        steer,
        faulty: BTreeMap::new(),
    };
    if url {
        let id = w.span_id();
        w.spans.push(Span {
            span_id: id.clone(),
            trace_id: trace_id.clone(),
            parent_id: None,
            operation: format!("GET /api/{}/{}", entry.service, entry.function_name),
            service: URL_SERVICE.into(),
            start_time: 0,
            duration: 0,
            attributes: BTreeMap::new(),
        });
        let lead = self_time(&mut w.rng, &LogNormalParams { mu: 3.0, sigma: 0.2 });
        let end = w.invoke(&entry, Some(id), lead, &entry.service.clone());
        w.spans[0].duration = end + lead;
    } else {
        w.invoke(&entry, None, 0, &entry.service.clone());
    }
    let faulty = w.faulty;
    let trace = Trace::new(trace_id, w.spans)?;
    Ok(GeneratedTrace { trace, entry, faulty })
}

/// Generates `n` traces; index `i` always yields the same trace.
pub fn generate_traces(system: &GeneratedSystem, n: usize, faults: &[FaultSpec]) -> Result<Vec<GeneratedTrace>, HarnessError> {
    check_faults(system, faults)?;
    (0..n).map(|i| generate_trace(system, i, faults)).collect()
}

/// Samples the inclusive duration of one unfaulted invocation of `f`.
pub fn sample_inclusive(system: &GeneratedSystem, f: &FunctionRef, rng: &mut ChaCha8Rng) -> u64 {
    let mut w = Walker {
        sys: system,
        rng: ChaCha8Rng::seed_from_u64(rng.random()),
        trace_id: String::new(),
        spans: Vec::new(),
        ids: HashSet::new(),
        fault: None,
        steer: HashMap::new(),
        faulty: BTreeMap::new(),
    };
    w.invoke(f, None, 0, &f.service.clone())
}

/// Set of operations per trace, for comparing kept structures.
pub fn kept_structure(trace: &Trace, kept: &BTreeSet<SpanId>) -> Vec<(Option<String>, String)> {
    let op_of = |id: &SpanId| trace.get(id).map(|s| s.operation.clone());
    let mut out: Vec<(Option<String>, String)> = trace
        .spans()
        .iter()
        .filter(|s| kept.contains(&s.span_id))
        .map(|s| {
            // nearest kept ancestor
            let mut p = s.parent_id.clone();
            while let Some(id) = &p {
                if kept.contains(id) {
                    break;
                }
                p = trace.get(id).and_then(|x| x.parent_id.clone());
            }
            (p.as_ref().and_then(op_of), s.operation.clone())
        })
        .collect();
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{align, PathCache};
    use crate::partition::{dss_signature, partition};

    #[test]
    fn same_seed_same_document() {
        let spec = SystemSpec::default();
        let a = generate_system(&spec).unwrap();
        let b = generate_system(&spec).unwrap();
        assert_eq!(serde_json::to_string(&a.doc).unwrap(), serde_json::to_string(&b.doc).unwrap());
        let c = generate_system(&SystemSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(serde_json::to_string(&a.doc).unwrap(), serde_json::to_string(&c.doc).unwrap());
    }

    #[test]
    fn default_system_shape() {
        let sys = generate_system(&SystemSpec::default()).unwrap();
        let g = sys.graph().unwrap();
        assert!(g.functions().count() <= 40);
        let forks = sys.truth.transitions.values().filter(|t| t.iter().filter(|x| x.weight > 0.0).count() > 1).count();
        assert!(forks > 0);
        assert!(!sys.shared.is_empty());
        let cross = sys.doc.functions.iter().any(|f| f.blocks.iter().any(|b| b.calls.iter().any(|c| c.service != f.service && !c.is_shared())));
        assert!(cross);
        assert!(!sys.truth.error_branches.is_empty());
    }

    #[test]
    fn single_function_is_one_set() {
        let spec = SystemSpec {
            n_services: 1,
            n_functions_per_service: 1,
            entry_points: 1,
            branch_probability: 0.0,
            error_branch_probability: 0.0,
            url_span_probability: 0.0,
            shared_library_fraction: 0.0,
            ..SystemSpec::default()
        };
        let sys = generate_system(&spec).unwrap();
        let g = sys.graph().unwrap();
        let map = sys.map(&g).unwrap();
        for t in generate_traces(&sys, 5, &[]).unwrap() {
            let p = align(&g, &t.trace, &map, &PathCache::default()).unwrap();
            assert_eq!(partition(&p, &g).len(), 1);
        }
    }

    #[test]
    fn comfort_economy_shape() {
        let sys = generate_system(&SystemSpec::comfort_economy(3)).unwrap();
        let g = sys.graph().unwrap();
        let root = FunctionRef::new("preserve", "Preserve", "preserve");
        let body = g.function(&root).unwrap();
        assert_eq!(body.blocks.len(), 6);
        let start = crate::cscfg::BlockId::new("start");
        assert_eq!(body.out_degree(&start), 2);
        let map = sys.map(&g).unwrap();
        let mut sigs = BTreeSet::new();
        for t in generate_traces(&sys, 20, &[]).unwrap() {
            let p = align(&g, &t.trace, &map, &PathCache::default()).unwrap();
            let n = t.trace.len();
            assert!(n == 5 || n == 4);
            sigs.insert(dss_signature(&partition(&p, &g)));
        }
        assert_eq!(sigs.len(), 2);
    }

    #[test]
    fn no_faults_no_labels() {
        let sys = generate_system(&SystemSpec::default()).unwrap();
        let traces = generate_traces(&sys, 100, &[]).unwrap();
        assert!(traces.iter().all(|t| t.faulty.is_empty()));
        assert_eq!(traces[7].trace.trace_id(), "t000007");
        assert_eq!(traces[7], generate_trace(&sys, 7, &[]).unwrap());
    }

    #[test]
    fn latency_fault_scales_self_time() {
        let sys = generate_system(&SystemSpec::default()).unwrap();
        let target = sys.functions().find(|f| !sys.truth.entries.contains(f) && !f.is_shared()).unwrap();
        let faults = vec![FaultSpec {
            kind: FaultKind::Latency { factor: 10.0 },
            target: target.clone(),
            window_start: 40,
            window_end: 50,
        }];
        let g = sys.graph().unwrap();
        let map = sys.map(&g).unwrap();
        let traces = generate_traces(&sys, 100, &faults).unwrap();
        for (i, t) in traces.iter().enumerate() {
            if !(40..50).contains(&i) {
                assert!(t.faulty.is_empty());
                continue;
            }
            let reached = t.trace.spans().iter().any(|s| map.resolve(s).function() == Some(&target));
            assert_eq!(!t.faulty.is_empty(), reached, "trace {i}");
            for (id, p) in &t.faulty {
                let span = t.trace.get(id).unwrap();
                assert_eq!(map.resolve(span).function(), Some(&target));
                let base = p.base_exclusive.unwrap();
                assert_eq!(t.trace.exclusive_duration(id).unwrap(), base * 10);
            }
        }
    }

    #[test]
    fn structural_fault_changes_signature() {
        let sys = generate_system(&SystemSpec::default()).unwrap();
        let (target, branch) = sys.truth.error_branches.iter().next().unwrap();
        let faults = vec![FaultSpec {
            kind: FaultKind::Structural,
            target: target.clone(),
            window_start: 0,
            window_end: 20,
        }];
        let g = sys.graph().unwrap();
        let map = sys.map(&g).unwrap();
        let traces = generate_traces(&sys, 60, &faults).unwrap();
        let sig = |t: &GeneratedTrace| dss_signature(&partition(&align(&g, &t.trace, &map, &PathCache::default()).unwrap(), &g));
        let faulted: BTreeSet<Vec<String>> = traces[..20].iter().map(sig).collect();
        let normal: BTreeSet<Vec<String>> = traces[20..].iter().filter(|t| t.entry == traces[0].entry).map(sig).collect();
        for t in &traces[..20] {
            assert_eq!(t.faulty.len(), 1);
            let s = t.trace.get(t.faulty.keys().next().unwrap()).unwrap();
            assert_eq!(s.operation, branch.handler.operation());
        }
        assert!(faulted.is_disjoint(&normal));
    }

    #[test]
    fn rejects_bad_specs_and_targets() {
        let bad = SystemSpec {
            branch_probability: 1.5,
            ..SystemSpec::default()
        };
        assert!(matches!(generate_system(&bad), Err(HarnessError::InvalidSpec(_))));
        let sys = generate_system(&SystemSpec::default()).unwrap();
        let ghost = FaultSpec {
            kind: FaultKind::Structural,
            target: FunctionRef::new("nope", "Nope", "nothing"),
            window_start: 0,
            window_end: 1,
        };
        assert!(matches!(generate_traces(&sys, 1, &[ghost]), Err(HarnessError::UnknownFaultTarget(_))));
    }

    #[test]
    fn default_faults_cover_four_percent() {
        let sys = generate_system(&SystemSpec::default()).unwrap();
        let faults = default_faults(&sys, 5000, DEFAULT_FAULT_FRACTION);
        assert!(faults.iter().any(|f| f.kind == FaultKind::Structural));
        let traces = generate_traces(&sys, 5000, &faults).unwrap();
        let faulty = traces.iter().filter(|t| !t.faulty.is_empty()).count();
        assert!((150..=260).contains(&faulty), "{faulty} faulty traces");
        assert!(faults.iter().all(|f| f.window_start >= 1000));
    }
}
