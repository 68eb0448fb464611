//! Resolving spans to the functions that produced them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cscfg::{Cscfg, FunctionRef, SHARED_SERVICE};
use crate::model::{Span, SpanId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnmappedReason {
    NoFunctionForm,
    UnknownService,
    UnknownFunction,
}

impl fmt::Display for UnmappedReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UnmappedReason::NoFunctionForm => "no-function-form",
            UnmappedReason::UnknownService => "unknown-service",
            UnmappedReason::UnknownFunction => "unknown-function",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Resolution {
    Resolved(FunctionRef),
    Unmapped(UnmappedReason),
}

impl Resolution {
    pub fn function(&self) -> Option<&FunctionRef> {
        match self {
            Resolution::Resolved(f) => Some(f),
            Resolution::Unmapped(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissRecord {
    pub trace_id: String,
    pub span_id: SpanId,
    pub service: String,
    pub operation: String,
    pub reason: UnmappedReason,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MappingError {
    #[error("shared dictionary lists {0} twice")]
    DuplicateSharedEntry(String),
    #[error("shared dictionary entry {0} does not use the SHARED service")]
    NotShared(FunctionRef),
    #[error("malformed shared dictionary: {0}")]
    MalformedDictionary(String),
}

/// One line of the shared-library dictionary file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedEntry {
    pub class_name: String,
    pub function_name: String,
}

pub fn parse_shared_dictionary(text: &str) -> Result<Vec<FunctionRef>, MappingError> {
    let entries: Vec<SharedEntry> =
        serde_json::from_str(text).map_err(|e| MappingError::MalformedDictionary(e.to_string()))?;
    Ok(entries
        .into_iter()
        .map(|e| FunctionRef::shared(e.class_name, e.function_name))
        .collect())
}

/// Splits an operation name into `(class, function)`.
///
/// Anything after `(` and any `<...>` type arguments are removed first, then
/// the name is split on its last `.`. URL-style names (containing whitespace
/// or `/`) and names without a `.` have no function form.
pub fn parse_operation(operation: &str) -> Option<(String, String)> {
    let head = operation.split('(').next().unwrap_or("");
    let mut cleaned = String::with_capacity(head.len());
    let mut depth = 0usize;
    for ch in head.chars() {
        match ch {
            '<' => depth += 1,
            '>' if depth > 0 => depth -= 1,
            _ if depth == 0 => cleaned.push(ch),
            _ => {}
        }
    }
    let cleaned = cleaned.trim();
    if cleaned.is_empty() || cleaned.contains(|c: char| c.is_whitespace() || c == '/') {
        return None;
    }
    let (class, function) = cleaned.rsplit_once('.')?;
    if class.is_empty() || function.is_empty() {
        return None;
    }
    Some((class.to_string(), function.to_string()))
}

/// Maps spans to `FunctionRef`s. Immutable after construction apart from the
/// miss log.
#[derive(Debug, Default)]
pub struct SpanFunctionMap {
    by_service: BTreeMap<String, BTreeMap<(String, String), FunctionRef>>,
    shared: BTreeMap<(String, String), FunctionRef>,
    misses: Mutex<Vec<MissRecord>>,
}

impl Clone for SpanFunctionMap {
    fn clone(&self) -> Self {
        SpanFunctionMap {
            by_service: self.by_service.clone(),
            shared: self.shared.clone(),
            misses: Mutex::new(self.misses()),
        }
    }
}

/// Indexes every function known to `graph` plus the shared dictionary.
pub fn build_map(graph: &Cscfg, shared_entries: &[FunctionRef]) -> Result<SpanFunctionMap, MappingError> {
    let mut map = SpanFunctionMap::default();
    let mut seen = BTreeSet::new();
    for e in shared_entries {
        if !e.is_shared() {
            return Err(MappingError::NotShared(e.clone()));
        }
        let key = (e.class_name.clone(), e.function_name.clone());
        if !seen.insert(key.clone()) {
            return Err(MappingError::DuplicateSharedEntry(e.operation()));
        }
        map.shared.insert(key, e.clone());
    }
    for f in graph.known_functions() {
        let key = (f.class_name.clone(), f.function_name.clone());
        if f.service == SHARED_SERVICE {
            map.shared.entry(key).or_insert(f);
        } else {
            map.by_service.entry(f.service.clone()).or_default().insert(key, f);
        }
    }
    Ok(map)
}

impl SpanFunctionMap {
    /// Pure lookup; nothing is logged.
    pub fn resolve(&self, span: &Span) -> Resolution {
        self.resolve_parts(&span.service, &span.operation)
    }

    pub fn resolve_parts(&self, service: &str, operation: &str) -> Resolution {
        let Some(key) = parse_operation(operation) else {
            return Resolution::Unmapped(UnmappedReason::NoFunctionForm);
        };
        let local = self.by_service.get(service);
        if let Some(f) = local.and_then(|m| m.get(&key)) {
            return Resolution::Resolved(f.clone());
        }
        if let Some(f) = self.shared.get(&key) {
            return Resolution::Resolved(f.clone());
        }
        Resolution::Unmapped(if local.is_some() {
            UnmappedReason::UnknownFunction
        } else {
            UnmappedReason::UnknownService
        })
    }

    /// Resolves and appends misses to the log.
    pub fn map_span(&self, span: &Span) -> Resolution {
        let r = self.resolve(span);
        if let Resolution::Unmapped(reason) = r {
            self.misses.lock().expect("miss log poisoned").push(MissRecord {
                trace_id: span.trace_id.clone(),
                span_id: span.span_id.clone(),
                service: span.service.clone(),
                operation: span.operation.clone(),
                reason,
            });
        }
        r
    }

    pub fn misses(&self) -> Vec<MissRecord> {
        self.misses.lock().expect("miss log poisoned").clone()
    }

    pub fn take_misses(&self) -> Vec<MissRecord> {
        std::mem::take(&mut *self.misses.lock().expect("miss log poisoned"))
    }

    pub fn service_count(&self) -> usize {
        self.by_service.len()
    }

    pub fn shared_count(&self) -> usize {
        self.shared.len()
    }
}
