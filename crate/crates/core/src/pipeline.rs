//! End-to-end processing of a trace stream: align, partition, score, select.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::align::{align, AlignError, ExecutionPath, PathCache};
use crate::cscfg::{AlignmentInsert, Cscfg};
use crate::mapping::SpanFunctionMap;
use crate::model::Trace;
use crate::partition::{partition, DominantSpanSet};
use crate::sampler::{dss_indices, score_trace, select, LrsLedger, SampleError, SamplingConfig, SamplingDecision};
use crate::scoring::Scorer;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Sample(#[from] SampleError),
}

/// Wall time spent per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub align: Duration,
    pub partition: Duration,
    pub scoring: Duration,
    pub selection: Duration,
    pub traces: u64,
}

impl StageTimings {
    /// Finding the span sets: alignment plus partitioning.
    pub fn identification(&self) -> Duration {
        self.align + self.partition
    }

    /// Choosing spans: scoring plus budget allocation and selection.
    pub fn sampling(&self) -> Duration {
        self.scoring + self.selection
    }

    pub fn total(&self) -> Duration {
        self.identification() + self.sampling()
    }

    pub fn per_trace(&self) -> Duration {
        if self.traces == 0 {
            Duration::ZERO
        } else {
            self.total() / self.traces as u32
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceOutcome {
    pub path: ExecutionPath,
    pub dss: Vec<DominantSpanSet>,
    pub decision: SamplingDecision,
}

pub struct Pipeline<'g> {
    graph: &'g Cscfg,
    map: &'g SpanFunctionMap,
    cfg: SamplingConfig,
    cache: PathCache,
    scorer: Scorer,
    ledger: LrsLedger,
    timings: StageTimings,
    inserts: BTreeSet<AlignmentInsert>,
}

impl<'g> Pipeline<'g> {
    pub fn new(graph: &'g Cscfg, map: &'g SpanFunctionMap, cfg: SamplingConfig) -> Result<Self, SampleError> {
        cfg.validate()?;
        Ok(Pipeline {
            graph,
            map,
            scorer: Scorer::new(cfg.scoring()),
            ledger: LrsLedger::new(cfg.lrs_horizon),
            cfg,
            cache: PathCache::default(),
            timings: StageTimings::default(),
            inserts: BTreeSet::new(),
        })
    }

    pub fn with_cache(mut self, cache: PathCache) -> Self {
        self.cache = cache;
        self
    }

    pub fn config(&self) -> &SamplingConfig {
        &self.cfg
    }

    pub fn scorer(&self) -> &Scorer {
        &self.scorer
    }

    pub fn ledger(&self) -> &LrsLedger {
        &self.ledger
    }

    pub fn cache(&self) -> &PathCache {
        &self.cache
    }

    pub fn timings(&self) -> StageTimings {
        self.timings
    }

    /// Spans inserted during alignment so far, for recording in the graph.
    pub fn alignment_inserts(&self) -> impl Iterator<Item = &AlignmentInsert> {
        self.inserts.iter()
    }

    fn identify(&self, trace: &Trace) -> (Result<(ExecutionPath, Vec<DominantSpanSet>), AlignError>, Duration, Duration) {
        for s in trace.spans() {
            self.map.map_span(s);
        }
        let t0 = Instant::now();
        let path = align(self.graph, trace, self.map, &self.cache);
        let t1 = Instant::now();
        let result = path.map(|p| {
            let dss = partition(&p, self.graph);
            (p, dss)
        });
        (result, t1 - t0, t1.elapsed())
    }

    fn sample(
        &mut self,
        trace: &Trace,
        path: ExecutionPath,
        dss: Vec<DominantSpanSet>,
    ) -> Result<TraceOutcome, PipelineError> {
        self.inserts.extend(path.alignment_inserts(trace));
        let t0 = Instant::now();
        let sets = dss_indices(trace, &dss)?;
        let scores = score_trace(trace, self.map, &mut self.scorer);
        let t1 = Instant::now();
        let decision = select(trace, &dss, &sets, &scores, &mut self.ledger, &self.cfg)?;
        self.timings.scoring += t1 - t0;
        self.timings.selection += t1.elapsed();
        self.timings.traces += 1;
        Ok(TraceOutcome { path, dss, decision })
    }

    pub fn process(&mut self, trace: &Trace) -> Result<TraceOutcome, PipelineError> {
        let (identified, a, p) = self.identify(trace);
        self.timings.align += a;
        self.timings.partition += p;
        let (path, dss) = identified?;
        self.sample(trace, path, dss)
    }

    /// Processes a batch. With more than one worker alignment and
    /// partitioning run in parallel; scoring and selection always run in
    /// trace order, so decisions do not depend on the worker count.
    pub fn process_batch(&mut self, traces: &[Trace], workers: usize) -> Vec<Result<TraceOutcome, PipelineError>> {
        if workers <= 1 {
            return traces.iter().map(|t| self.process(t)).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("thread pool");
        let this = &*self;
        let identified: Vec<_> = pool.install(|| traces.par_iter().map(|t| this.identify(t)).collect());
        identified
            .into_iter()
            .zip(traces)
            .map(|((r, a, p), trace)| {
                self.timings.align += a;
                self.timings.partition += p;
                let (path, dss) = r?;
                self.sample(trace, path, dss)
            })
            .collect()
    }
}
