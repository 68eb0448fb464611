//! Call-site control flow graph.
//!
//! The graph is built from a declarative call-graph document: one CFG per
//! function, with each basic block listing the calls it makes in program
//! order. Blocks without calls are dropped and flow edges are contracted
//! across them, so every remaining block is a call site.
//!
//! Each function body is analysed with a virtual entry node (whose
//! successors are the first reachable call sites) and a virtual exit node.
//! When the original CFG can run from entry to exit without making any call
//! the body is `skippable` and the virtual entry links straight to the
//! virtual exit. Dominance is intraprocedural; call edges are opaque.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mapping::{Resolution, SpanFunctionMap};
use crate::model::Trace;

/// Service sentinel for functions living in a shared library.
pub const SHARED_SERVICE: &str = "SHARED";

/// Current version of the call-graph and artifact documents.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FunctionRef {
    pub service: String,
    pub class_name: String,
    pub function_name: String,
}

impl FunctionRef {
    pub fn new(
        service: impl Into<String>,
        class_name: impl Into<String>,
        function_name: impl Into<String>,
    ) -> Self {
        FunctionRef {
            service: service.into(),
            class_name: class_name.into(),
            function_name: function_name.into(),
        }
    }

    pub fn shared(class_name: impl Into<String>, function_name: impl Into<String>) -> Self {
        Self::new(SHARED_SERVICE, class_name, function_name)
    }

    pub fn is_shared(&self) -> bool {
        self.service == SHARED_SERVICE
    }

    /// The `Class.FunctionName` operation name spans carry for this function.
    pub fn operation(&self) -> String {
        format!("{}.{}", self.class_name, self.function_name)
    }

    fn is_well_formed(&self) -> bool {
        !self.service.is_empty() && !self.class_name.is_empty() && !self.function_name.is_empty()
    }
}

impl fmt::Display for FunctionRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}.{}", self.service, self.class_name, self.function_name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub String);

impl BlockId {
    pub fn new(value: impl Into<String>) -> Self {
        BlockId(value.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for BlockId {
    fn from(s: &str) -> Self {
        BlockId(s.to_string())
    }
}

/// Where a graph element came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Static,
    DynamicPatch,
    AlignmentInsert,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallSite {
    pub callee: FunctionRef,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CallSiteBlock {
    pub id: BlockId,
    pub owner: FunctionRef,
    pub callees: Vec<CallSite>,
    pub provenance: Provenance,
}

/// Contracted CFG of one function.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FunctionBody {
    pub function: FunctionRef,
    /// Call-site blocks in program order.
    pub blocks: Vec<BlockId>,
    /// Successors of the virtual entry.
    pub entries: BTreeSet<BlockId>,
    /// Predecessors of the virtual exit.
    pub exits: BTreeSet<BlockId>,
    /// The original CFG can reach its exit without making a call.
    pub skippable: bool,
    pub flow: BTreeMap<BlockId, BTreeMap<BlockId, Provenance>>,
}

impl FunctionBody {
    fn empty(function: FunctionRef) -> Self {
        FunctionBody {
            function,
            blocks: Vec::new(),
            entries: BTreeSet::new(),
            exits: BTreeSet::new(),
            skippable: true,
            flow: BTreeMap::new(),
        }
    }

    pub fn successors(&self, block: &BlockId) -> impl Iterator<Item = &BlockId> {
        self.flow.get(block).into_iter().flat_map(|m| m.keys())
    }

    /// Flow out-degree; values above one mark a branch point.
    pub fn out_degree(&self, block: &BlockId) -> usize {
        self.flow.get(block).map_or(0, |m| m.len()) + usize::from(self.exits.contains(block))
    }

    pub fn flow_edge_count(&self) -> usize {
        self.flow.values().map(|m| m.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CallEdge {
    pub from: BlockId,
    pub callee: FunctionRef,
    /// Entry blocks of the callee.
    pub targets: Vec<BlockId>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReturnEdge {
    /// Exit blocks of the callee.
    pub from: Vec<BlockId>,
    pub callee: FunctionRef,
    pub to: BlockId,
    pub provenance: Provenance,
}

/// A span that had to be inserted during path alignment.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AlignmentInsert {
    pub owner: Option<FunctionRef>,
    pub after_block: Option<BlockId>,
    pub service: String,
    pub operation: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("malformed call-graph document: {0}")]
    MalformedDocument(String),
    #[error("unsupported schema_version {0}")]
    UnsupportedSchema(u32),
    #[error("{caller} calls {callee}, which is neither defined nor declared external")]
    DanglingCallee {
        caller: FunctionRef,
        callee: FunctionRef,
    },
    #[error("unknown function {0}")]
    UnknownFunction(FunctionRef),
    #[error("block {0} is not reachable from its function entry")]
    UnreachableBlock(BlockId),
    #[error("block {0} cannot reach its function exit")]
    NoExitPath(BlockId),
}

// ---------------------------------------------------------------------------
// call-graph document

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CallGraphDoc {
    pub schema_version: u32,
    pub functions: Vec<FunctionDoc>,
    #[serde(default)]
    pub external: Vec<FunctionRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionDoc {
    pub service: String,
    pub class_name: String,
    pub function_name: String,
    /// Entry block; absent only when the function has no blocks.
    #[serde(default)]
    pub entry: Option<String>,
    #[serde(default)]
    pub exits: Vec<String>,
    #[serde(default)]
    pub blocks: Vec<BlockDoc>,
    /// Intraprocedural flow edges `[from, to]`.
    #[serde(default)]
    pub edges: Vec<(String, String)>,
}

impl FunctionDoc {
    pub fn function(&self) -> FunctionRef {
        FunctionRef::new(&self.service, &self.class_name, &self.function_name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockDoc {
    pub id: String,
    #[serde(default)]
    pub calls: Vec<FunctionRef>,
}

pub fn parse_call_graph(text: &str) -> Result<CallGraphDoc, GraphError> {
    serde_json::from_str(text).map_err(|e| GraphError::MalformedDocument(e.to_string()))
}

// ---------------------------------------------------------------------------
// frozen artifact

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CscfgArtifact {
    pub schema_version: u32,
    pub kind: String,
    pub functions: Vec<FunctionArtifact>,
    #[serde(default)]
    pub external: Vec<FunctionRef>,
    #[serde(default)]
    pub alignment_inserts: Vec<AlignmentInsert>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionArtifact {
    pub service: String,
    pub class_name: String,
    pub function_name: String,
    pub blocks: Vec<BlockArtifact>,
    pub flow_edges: Vec<FlowEdgeArtifact>,
    pub entries: Vec<BlockId>,
    pub exits: Vec<BlockId>,
    pub skippable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockArtifact {
    pub id: BlockId,
    pub provenance: Provenance,
    pub callees: Vec<CallSite>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowEdgeArtifact {
    pub from: BlockId,
    pub to: BlockId,
    pub provenance: Provenance,
}

// ---------------------------------------------------------------------------

/// The call-site control flow graph of a whole system.
#[derive(Debug, Default)]
pub struct Cscfg {
    functions: BTreeMap<FunctionRef, FunctionBody>,
    blocks: BTreeMap<BlockId, CallSiteBlock>,
    external: BTreeSet<FunctionRef>,
    alignment_inserts: BTreeSet<AlignmentInsert>,
    dominance: RwLock<HashMap<FunctionRef, Arc<DominanceInfo>>>,
}

impl Clone for Cscfg {
    fn clone(&self) -> Self {
        Cscfg {
            functions: self.functions.clone(),
            blocks: self.blocks.clone(),
            external: self.external.clone(),
            alignment_inserts: self.alignment_inserts.clone(),
            dominance: RwLock::default(),
        }
    }
}

impl PartialEq for Cscfg {
    fn eq(&self, other: &Self) -> bool {
        self.functions == other.functions
            && self.blocks == other.blocks
            && self.external == other.external
            && self.alignment_inserts == other.alignment_inserts
    }
}

/// Builds the call-site graph from a parsed call-graph document.
pub fn build_cscfg(doc: &CallGraphDoc) -> Result<Cscfg, GraphError> {
    if doc.schema_version != SCHEMA_VERSION {
        return Err(GraphError::UnsupportedSchema(doc.schema_version));
    }
    let mut defined = BTreeSet::new();
    for f in &doc.functions {
        let func = f.function();
        if !func.is_well_formed() {
            return Err(GraphError::MalformedDocument(format!(
                "function with empty name component: {func}"
            )));
        }
        if !defined.insert(func.clone()) {
            return Err(GraphError::MalformedDocument(format!("function {func} defined twice")));
        }
    }
    let external: BTreeSet<FunctionRef> = doc.external.iter().cloned().collect();

    let mut graph = Cscfg {
        external,
        ..Cscfg::default()
    };
    let mut seen_blocks = BTreeSet::new();
    for f in &doc.functions {
        let func = f.function();
        for b in &f.blocks {
            if !seen_blocks.insert(b.id.clone()) {
                return Err(GraphError::MalformedDocument(format!("block id {} used twice", b.id)));
            }
            for callee in &b.calls {
                if !defined.contains(callee) && !graph.external.contains(callee) {
                    return Err(GraphError::DanglingCallee {
                        caller: func.clone(),
                        callee: callee.clone(),
                    });
                }
            }
        }
        let body = contract_function(f, &func)?;
        for raw in &f.blocks {
            if raw.calls.is_empty() {
                continue;
            }
            graph.blocks.insert(
                BlockId::new(&raw.id),
                CallSiteBlock {
                    id: BlockId::new(&raw.id),
                    owner: func.clone(),
                    callees: raw
                        .calls
                        .iter()
                        .map(|c| CallSite {
                            callee: c.clone(),
                            provenance: Provenance::Static,
                        })
                        .collect(),
                    provenance: Provenance::Static,
                },
            );
        }
        graph.functions.insert(func, body);
    }
    for body in graph.functions.values() {
        check_reachability(body)?;
    }
    Ok(graph)
}

fn contract_function(f: &FunctionDoc, func: &FunctionRef) -> Result<FunctionBody, GraphError> {
    if f.blocks.is_empty() {
        if !f.edges.is_empty() {
            return Err(GraphError::MalformedDocument(format!("{func} has edges but no blocks")));
        }
        return Ok(FunctionBody::empty(func.clone()));
    }
    let index: HashMap<&str, usize> = f
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id.as_str(), i))
        .collect();
    let lookup = |id: &str| {
        index.get(id).copied().ok_or_else(|| {
            GraphError::MalformedDocument(format!("{func} references block {id} it does not own"))
        })
    };
    let entry = match &f.entry {
        Some(e) => lookup(e)?,
        None => {
            return Err(GraphError::MalformedDocument(format!("{func} has blocks but no entry")))
        }
    };
    if f.exits.is_empty() {
        return Err(GraphError::MalformedDocument(format!("{func} declares no exit block")));
    }
    let mut is_exit = vec![false; f.blocks.len()];
    for e in &f.exits {
        is_exit[lookup(e)?] = true;
    }
    let mut succ = vec![Vec::new(); f.blocks.len()];
    for (a, b) in &f.edges {
        let (a, b) = (lookup(a)?, lookup(b)?);
        succ[a].push(b);
    }
    let kept: Vec<bool> = f.blocks.iter().map(|b| !b.calls.is_empty()).collect();

    // call sites reachable from `start` passing only through call-free blocks
    let frontier = |start: &[usize]| -> (BTreeSet<BlockId>, bool) {
        let mut reached = BTreeSet::new();
        let mut hits_exit = false;
        let mut visited = vec![false; f.blocks.len()];
        let mut stack: Vec<usize> = start.to_vec();
        while let Some(v) = stack.pop() {
            if visited[v] {
                continue;
            }
            visited[v] = true;
            if kept[v] {
                reached.insert(BlockId::new(&f.blocks[v].id));
                continue;
            }
            if is_exit[v] {
                hits_exit = true;
            }
            stack.extend(succ[v].iter().copied());
        }
        (reached, hits_exit)
    };

    let (entries, skippable) = frontier(&[entry]);
    let mut body = FunctionBody {
        function: func.clone(),
        blocks: Vec::new(),
        entries,
        exits: BTreeSet::new(),
        skippable,
        flow: BTreeMap::new(),
    };
    for (i, raw) in f.blocks.iter().enumerate() {
        if !kept[i] {
            continue;
        }
        let id = BlockId::new(&raw.id);
        let (targets, hits_exit) = frontier(&succ[i]);
        if is_exit[i] || hits_exit {
            body.exits.insert(id.clone());
        }
        let edges: BTreeMap<BlockId, Provenance> =
            targets.into_iter().map(|t| (t, Provenance::Static)).collect();
        if !edges.is_empty() {
            body.flow.insert(id.clone(), edges);
        }
        body.blocks.push(id);
    }
    Ok(body)
}

fn check_reachability(body: &FunctionBody) -> Result<(), GraphError> {
    let g = LocalGraph::new(body);
    let fwd = g.reachable(0, &g.succ);
    let bwd = g.reachable(g.exit(), &g.pred);
    for (i, id) in body.blocks.iter().enumerate() {
        if !fwd[i + 1] {
            return Err(GraphError::UnreachableBlock(id.clone()));
        }
        if !bwd[i + 1] {
            return Err(GraphError::NoExitPath(id.clone()));
        }
    }
    Ok(())
}

impl Cscfg {
    pub fn from_doc_str(text: &str) -> Result<Self, GraphError> {
        build_cscfg(&parse_call_graph(text)?)
    }

    pub fn functions(&self) -> impl Iterator<Item = &FunctionBody> {
        self.functions.values()
    }

    pub fn function(&self, f: &FunctionRef) -> Option<&FunctionBody> {
        self.functions.get(f)
    }

    pub fn is_defined(&self, f: &FunctionRef) -> bool {
        self.functions.contains_key(f)
    }

    pub fn is_external(&self, f: &FunctionRef) -> bool {
        self.external.contains(f)
    }

    pub fn externals(&self) -> impl Iterator<Item = &FunctionRef> {
        self.external.iter()
    }

    /// Every function the graph knows about: defined, external, or called.
    pub fn known_functions(&self) -> BTreeSet<FunctionRef> {
        let mut all: BTreeSet<FunctionRef> = self.functions.keys().cloned().collect();
        all.extend(self.external.iter().cloned());
        for b in self.blocks.values() {
            all.extend(b.callees.iter().map(|c| c.callee.clone()));
        }
        all
    }

    pub fn block(&self, id: &BlockId) -> Option<&CallSiteBlock> {
        self.blocks.get(id)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &CallSiteBlock> {
        self.blocks.values()
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn flow_edge_count(&self) -> usize {
        self.functions.values().map(|b| b.flow_edge_count()).sum()
    }

    /// Call edges into callees that have call-site blocks of their own.
    pub fn call_edges(&self) -> Vec<CallEdge> {
        let mut out = Vec::new();
        for block in self.blocks.values() {
            for site in &block.callees {
                let Some(body) = self.functions.get(&site.callee) else {
                    continue;
                };
                if body.entries.is_empty() {
                    continue;
                }
                out.push(CallEdge {
                    from: block.id.clone(),
                    callee: site.callee.clone(),
                    targets: body.entries.iter().cloned().collect(),
                    provenance: site.provenance,
                });
            }
        }
        out
    }

    /// Return edges, one per call edge, from the callee's exits back to the caller.
    pub fn return_edges(&self) -> Vec<ReturnEdge> {
        self.call_edges()
            .into_iter()
            .map(|e| ReturnEdge {
                from: self.functions[&e.callee].exits.iter().cloned().collect(),
                callee: e.callee,
                to: e.from,
                provenance: e.provenance,
            })
            .collect()
    }

    /// Blocks anywhere in the graph that call `f`.
    pub fn callers(&self, f: &FunctionRef) -> Vec<BlockId> {
        self.blocks
            .values()
            .filter(|b| b.callees.iter().any(|c| &c.callee == f))
            .map(|b| b.id.clone())
            .collect()
    }

    /// Defined functions no block calls: the request entry points.
    pub fn entry_points(&self) -> Vec<FunctionRef> {
        let called: BTreeSet<&FunctionRef> = self
            .blocks
            .values()
            .flat_map(|b| b.callees.iter().map(|c| &c.callee))
            .collect();
        self.functions
            .keys()
            .filter(|f| !called.contains(f))
            .cloned()
            .collect()
    }

    pub fn provenance_counts(&self) -> BTreeMap<Provenance, usize> {
        let mut counts = BTreeMap::new();
        for b in self.blocks.values() {
            for c in &b.callees {
                if self.functions.get(&c.callee).is_some_and(|f| !f.entries.is_empty()) {
                    *counts.entry(c.provenance).or_insert(0) += 1;
                }
            }
        }
        counts
            .entry(Provenance::AlignmentInsert)
            .or_insert(self.alignment_inserts.len());
        counts
    }

    pub fn alignment_inserts(&self) -> impl Iterator<Item = &AlignmentInsert> {
        self.alignment_inserts.iter()
    }

    /// Records spans inserted during alignment. They never take part in dominance.
    pub fn record_alignment_inserts(&mut self, inserts: impl IntoIterator<Item = AlignmentInsert>) {
        self.alignment_inserts.extend(inserts);
    }

    /// Cached dominance for `f`, computed on first use.
    pub fn dominance(&self, f: &FunctionRef) -> Result<Arc<DominanceInfo>, GraphError> {
        if let Some(info) = self.dominance.read().expect("dominance cache poisoned").get(f) {
            return Ok(Arc::clone(info));
        }
        let info = Arc::new(compute_dominance(self, f)?);
        self.dominance
            .write()
            .expect("dominance cache poisoned")
            .insert(f.clone(), Arc::clone(&info));
        Ok(info)
    }

    fn invalidate(&mut self, f: &FunctionRef) {
        self.dominance.get_mut().expect("dominance cache poisoned").remove(f);
    }

    // -- artifact -----------------------------------------------------------

    pub fn to_artifact(&self) -> CscfgArtifact {
        let functions = self
            .functions
            .values()
            .map(|body| FunctionArtifact {
                service: body.function.service.clone(),
                class_name: body.function.class_name.clone(),
                function_name: body.function.function_name.clone(),
                blocks: body
                    .blocks
                    .iter()
                    .map(|id| {
                        let b = &self.blocks[id];
                        BlockArtifact {
                            id: id.clone(),
                            provenance: b.provenance,
                            callees: b.callees.clone(),
                        }
                    })
                    .collect(),
                flow_edges: body
                    .flow
                    .iter()
                    .flat_map(|(from, tos)| {
                        tos.iter().map(move |(to, p)| FlowEdgeArtifact {
                            from: from.clone(),
                            to: to.clone(),
                            provenance: *p,
                        })
                    })
                    .collect(),
                entries: body.entries.iter().cloned().collect(),
                exits: body.exits.iter().cloned().collect(),
                skippable: body.skippable,
            })
            .collect();
        CscfgArtifact {
            schema_version: SCHEMA_VERSION,
            kind: "cscfg".into(),
            functions,
            external: self.external.iter().cloned().collect(),
            alignment_inserts: self.alignment_inserts.iter().cloned().collect(),
        }
    }

    pub fn from_artifact(art: &CscfgArtifact) -> Result<Self, GraphError> {
        if art.schema_version != SCHEMA_VERSION {
            return Err(GraphError::UnsupportedSchema(art.schema_version));
        }
        if art.kind != "cscfg" {
            return Err(GraphError::MalformedDocument(format!("unexpected artifact kind {}", art.kind)));
        }
        let mut graph = Cscfg {
            external: art.external.iter().cloned().collect(),
            alignment_inserts: art.alignment_inserts.iter().cloned().collect(),
            ..Cscfg::default()
        };
        for fa in &art.functions {
            let func = FunctionRef::new(&fa.service, &fa.class_name, &fa.function_name);
            let mut body = FunctionBody::empty(func.clone());
            body.skippable = fa.skippable;
            body.entries = fa.entries.iter().cloned().collect();
            body.exits = fa.exits.iter().cloned().collect();
            for b in &fa.blocks {
                if b.callees.is_empty() {
                    return Err(GraphError::MalformedDocument(format!("block {} has no calls", b.id)));
                }
                if graph.blocks.contains_key(&b.id) {
                    return Err(GraphError::MalformedDocument(format!("block id {} used twice", b.id)));
                }
                body.blocks.push(b.id.clone());
                graph.blocks.insert(
                    b.id.clone(),
                    CallSiteBlock {
                        id: b.id.clone(),
                        owner: func.clone(),
                        callees: b.callees.clone(),
                        provenance: b.provenance,
                    },
                );
            }
            let owned: BTreeSet<&BlockId> = body.blocks.iter().collect();
            for e in &fa.flow_edges {
                if !owned.contains(&e.from) || !owned.contains(&e.to) {
                    return Err(GraphError::MalformedDocument(format!(
                        "flow edge {} -> {} leaves {func}",
                        e.from, e.to
                    )));
                }
                body.flow.entry(e.from.clone()).or_default().insert(e.to.clone(), e.provenance);
            }
            if body.entries.iter().chain(body.exits.iter()).any(|b| !owned.contains(b)) {
                return Err(GraphError::MalformedDocument(format!("{func} entry/exit outside body")));
            }
            check_reachability(&body)?;
            graph.functions.insert(func, body);
        }
        Ok(graph)
    }

    // -- dynamic patching ---------------------------------------------------

    /// Adds call edges observed at runtime that static analysis missed.
    ///
    /// For each parent/child span pair whose functions are both known but
    /// where the parent's function has no call site for the child, a
    /// `DynamicPatch` call site is placed right after the call whose span is
    /// the nearest sibling started before the child. Without such a sibling
    /// a synthetic optional block is appended after the function's exits.
    pub fn patch_with_traces<'a>(
        &mut self,
        traces: impl IntoIterator<Item = &'a Trace>,
        map: &SpanFunctionMap,
    ) -> PatchReport {
        let mut report = PatchReport::default();
        for trace in traces {
            let resolved: Vec<Option<FunctionRef>> = trace
                .spans()
                .iter()
                .map(|s| match map.resolve(s) {
                    Resolution::Resolved(f) => Some(f),
                    Resolution::Unmapped(_) => None,
                })
                .collect();
            for parent in 0..trace.len() {
                for (pos, &child) in trace.child_indices(parent).iter().enumerate() {
                    report.pairs_examined += 1;
                    let (Some(pf), Some(cf)) = (&resolved[parent], &resolved[child]) else {
                        report.unresolved += 1;
                        continue;
                    };
                    if !self.functions.contains_key(pf)
                        || !(self.functions.contains_key(cf) || self.external.contains(cf))
                    {
                        report.unresolved += 1;
                        continue;
                    }
                    if self.function_calls(pf, cf) {
                        report.already_present += 1;
                        continue;
                    }
                    let preceding = trace.child_indices(parent)[..pos]
                        .iter()
                        .rev()
                        .filter_map(|&s| resolved[s].as_ref())
                        .find_map(|sf| self.first_call_site(pf, sf));
                    match preceding {
                        Some((block, slot)) => {
                            let b = self.blocks.get_mut(&block).expect("call site exists");
                            b.callees.insert(
                                slot + 1,
                                CallSite {
                                    callee: cf.clone(),
                                    provenance: Provenance::DynamicPatch,
                                },
                            );
                        }
                        None => {
                            self.append_patch_block(pf, cf);
                            report.added_blocks += 1;
                        }
                    }
                    report.added_edges += 1;
                    self.invalidate(pf);
                }
            }
        }
        report
    }

    fn function_calls(&self, caller: &FunctionRef, callee: &FunctionRef) -> bool {
        self.functions[caller]
            .blocks
            .iter()
            .any(|b| self.blocks[b].callees.iter().any(|c| &c.callee == callee))
    }

    fn first_call_site(&self, caller: &FunctionRef, callee: &FunctionRef) -> Option<(BlockId, usize)> {
        self.functions[caller].blocks.iter().find_map(|b| {
            self.blocks[b]
                .callees
                .iter()
                .position(|c| &c.callee == callee)
                .map(|slot| (b.clone(), slot))
        })
    }

    fn append_patch_block(&mut self, owner: &FunctionRef, callee: &FunctionRef) {
        let body = self.functions.get_mut(owner).expect("owner is defined");
        let mut n = body.blocks.len();
        let id = loop {
            let candidate = BlockId::new(format!("{owner}#patch{n}"));
            if !self.blocks.contains_key(&candidate) {
                break candidate;
            }
            n += 1;
        };
        if body.blocks.is_empty() {
            body.entries.insert(id.clone());
        } else {
            for exit in &body.exits {
                body.flow
                    .entry(exit.clone())
                    .or_default()
                    .insert(id.clone(), Provenance::DynamicPatch);
            }
        }
        // existing exits stay exits, so the patched call remains optional
        body.exits.insert(id.clone());
        body.blocks.push(id.clone());
        self.blocks.insert(
            id.clone(),
            CallSiteBlock {
                id,
                owner: owner.clone(),
                callees: vec![CallSite {
                    callee: callee.clone(),
                    provenance: Provenance::DynamicPatch,
                }],
                provenance: Provenance::DynamicPatch,
            },
        );
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchReport {
    pub pairs_examined: usize,
    pub already_present: usize,
    pub added_edges: usize,
    pub added_blocks: usize,
    pub unresolved: usize,
}

// ---------------------------------------------------------------------------
// dominance

/// A node of a function's analysis graph.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DomNode {
    Entry,
    Block(BlockId),
    Exit,
}

/// Index-based view of one function body: 0 is the virtual entry, blocks
/// follow in program order, and the last node is the virtual exit.
struct LocalGraph {
    succ: Vec<Vec<usize>>,
    pred: Vec<Vec<usize>>,
}

impl LocalGraph {
    fn new(body: &FunctionBody) -> Self {
        let n = body.blocks.len();
        let idx: HashMap<&BlockId, usize> =
            body.blocks.iter().enumerate().map(|(i, b)| (b, i + 1)).collect();
        let exit = n + 1;
        let mut succ = vec![Vec::new(); n + 2];
        for e in &body.entries {
            succ[0].push(idx[e]);
        }
        if body.skippable {
            succ[0].push(exit);
        }
        for (i, b) in body.blocks.iter().enumerate() {
            if let Some(tos) = body.flow.get(b) {
                succ[i + 1].extend(tos.keys().map(|t| idx[t]));
            }
            if body.exits.contains(b) {
                succ[i + 1].push(exit);
            }
        }
        let mut pred = vec![Vec::new(); n + 2];
        for (u, vs) in succ.iter().enumerate() {
            for &v in vs {
                pred[v].push(u);
            }
        }
        LocalGraph { succ, pred }
    }

    fn exit(&self) -> usize {
        self.succ.len() - 1
    }

    fn reachable(&self, start: usize, adj: &[Vec<usize>]) -> Vec<bool> {
        let mut seen = vec![false; adj.len()];
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            if std::mem::replace(&mut seen[u], true) {
                continue;
            }
            stack.extend(adj[u].iter().copied());
        }
        seen
    }
}

/// Immediate dominators (Cooper, Harvey & Kennedy). `idom[start] == start`.
fn immediate_dominators(start: usize, succ: &[Vec<usize>], pred: &[Vec<usize>]) -> Vec<usize> {
    let n = succ.len();
    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    // iterative postorder
    let mut stack = vec![(start, 0usize)];
    visited[start] = true;
    while let Some((u, i)) = stack.pop() {
        if i < succ[u].len() {
            stack.push((u, i + 1));
            let v = succ[u][i];
            if !visited[v] {
                visited[v] = true;
                stack.push((v, 0));
            }
        } else {
            order.push(u);
        }
    }
    let mut rank = vec![usize::MAX; n];
    for (r, &u) in order.iter().enumerate() {
        rank[u] = r;
    }
    const UNDEF: usize = usize::MAX;
    let mut idom = vec![UNDEF; n];
    idom[start] = start;
    let intersect = |idom: &[usize], mut a: usize, mut b: usize| {
        while a != b {
            while rank[a] < rank[b] {
                a = idom[a];
            }
            while rank[b] < rank[a] {
                b = idom[b];
            }
        }
        a
    };
    let mut changed = true;
    while changed {
        changed = false;
        for &u in order.iter().rev() {
            if u == start {
                continue;
            }
            let mut new = UNDEF;
            for &p in &pred[u] {
                if idom[p] == UNDEF {
                    continue;
                }
                new = if new == UNDEF { p } else { intersect(&idom, p, new) };
            }
            if new != UNDEF && idom[u] != new {
                idom[u] = new;
                changed = true;
            }
        }
    }
    idom
}

fn tree_contains(idom: &[usize], root: usize, ancestor: usize, mut node: usize) -> bool {
    loop {
        if node == ancestor {
            return true;
        }
        if node == root {
            return false;
        }
        node = idom[node];
    }
}

/// Dominator, post-dominator and control-equivalence data for one function.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DominanceInfo {
    pub function: FunctionRef,
    pub idom: BTreeMap<BlockId, DomNode>,
    pub ipdom: BTreeMap<BlockId, DomNode>,
    /// Block to class id. Class 0 is always the class of the virtual entry.
    pub equiv_class: BTreeMap<BlockId, usize>,
    classes: Vec<Vec<BlockId>>,
    nodes: Vec<DomNode>,
    index: HashMap<BlockId, usize>,
    dom: Vec<usize>,
    pdom: Vec<usize>,
}

impl DominanceInfo {
    pub const ENTRY_CLASS: usize = 0;

    fn node_index(&self, n: &DomNode) -> Option<usize> {
        match n {
            DomNode::Entry => Some(0),
            DomNode::Exit => Some(self.nodes.len() - 1),
            DomNode::Block(b) => self.index.get(b).copied(),
        }
    }

    /// Every entry-to-`b` path passes through `a`.
    pub fn dominates(&self, a: &DomNode, b: &DomNode) -> bool {
        match (self.node_index(a), self.node_index(b)) {
            (Some(a), Some(b)) => tree_contains(&self.dom, 0, a, b),
            _ => false,
        }
    }

    /// Every `b`-to-exit path passes through `a`.
    pub fn post_dominates(&self, a: &DomNode, b: &DomNode) -> bool {
        let exit = self.nodes.len() - 1;
        match (self.node_index(a), self.node_index(b)) {
            (Some(a), Some(b)) => tree_contains(&self.pdom, exit, a, b),
            _ => false,
        }
    }

    pub fn class_of(&self, b: &BlockId) -> Option<usize> {
        self.equiv_class.get(b).copied()
    }

    /// Blocks in class `id` (the entry class may be empty).
    pub fn class_members(&self, id: usize) -> &[BlockId] {
        self.classes.get(id).map_or(&[], |v| v.as_slice())
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }
}

/// Computes dominance on the body of `function`, call edges treated as opaque.
pub fn compute_dominance(graph: &Cscfg, function: &FunctionRef) -> Result<DominanceInfo, GraphError> {
    let body = graph
        .function(function)
        .ok_or_else(|| GraphError::UnknownFunction(function.clone()))?;
    let g = LocalGraph::new(body);
    let exit = g.exit();
    let fwd = g.reachable(0, &g.succ);
    let bwd = g.reachable(exit, &g.pred);
    for (i, id) in body.blocks.iter().enumerate() {
        if !fwd[i + 1] {
            return Err(GraphError::UnreachableBlock(id.clone()));
        }
        if !bwd[i + 1] {
            return Err(GraphError::NoExitPath(id.clone()));
        }
    }
    let dom = immediate_dominators(0, &g.succ, &g.pred);
    let pdom = immediate_dominators(exit, &g.pred, &g.succ);

    let mut nodes = vec![DomNode::Entry];
    nodes.extend(body.blocks.iter().cloned().map(DomNode::Block));
    nodes.push(DomNode::Exit);

    // control equivalence: a dom b and b pdom a
    let mut uf: Vec<usize> = (0..nodes.len()).collect();
    fn find(uf: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while uf[r] != r {
            r = uf[r];
        }
        let mut x = x;
        while uf[x] != r {
            let next = uf[x];
            uf[x] = r;
            x = next;
        }
        r
    }
    for b in 1..nodes.len() {
        let mut a = dom[b];
        loop {
            if tree_contains(&pdom, exit, b, a) {
                let (ra, rb) = (find(&mut uf, a), find(&mut uf, b));
                uf[ra.max(rb)] = ra.min(rb);
            }
            if a == 0 {
                break;
            }
            a = dom[a];
        }
    }
    let mut class_id: HashMap<usize, usize> = HashMap::new();
    let mut classes: Vec<Vec<BlockId>> = Vec::new();
    let mut equiv_class = BTreeMap::new();
    for i in 0..nodes.len() {
        let root = find(&mut uf, i);
        let next = class_id.len();
        let id = *class_id.entry(root).or_insert(next);
        if id == classes.len() {
            classes.push(Vec::new());
        }
        if let DomNode::Block(b) = &nodes[i] {
            classes[id].push(b.clone());
            equiv_class.insert(b.clone(), id);
        }
    }
    // drop a trailing exit-only class
    while classes.len() > 1 && classes.last().is_some_and(|c| c.is_empty()) {
        classes.pop();
    }

    let idom = body
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| (b.clone(), nodes[dom[i + 1]].clone()))
        .collect();
    let ipdom = body
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| (b.clone(), nodes[pdom[i + 1]].clone()))
        .collect();
    let index = body
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| (b.clone(), i + 1))
        .collect();
    Ok(DominanceInfo {
        function: function.clone(),
        idom,
        ipdom,
        equiv_class,
        classes,
        nodes,
        index,
        dom,
        pdom,
    })
}

/// Partition of a function's call-site blocks into mutual-dominance classes.
pub fn mutual_dominance_classes(
    graph: &Cscfg,
    function: &FunctionRef,
) -> Result<Vec<BTreeSet<BlockId>>, GraphError> {
    let info = graph.dominance(function)?;
    Ok((0..info.class_count())
        .map(|c| info.class_members(c).iter().cloned().collect::<BTreeSet<_>>())
        .filter(|c| !c.is_empty())
        .collect())
}
