use std::io::Write;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::time::Timestamp;

/// Outcome of a request as seen by the audit log.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Allowed,
    RejectedAuthn,
    RejectedAuthz,
    RejectedPolicy,
    Error,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Allowed => "ALLOWED",
            Decision::RejectedAuthn => "REJECTED_AUTHN",
            Decision::RejectedAuthz => "REJECTED_AUTHZ",
            Decision::RejectedPolicy => "REJECTED_POLICY",
            Decision::Error => "ERROR",
        }
    }

    pub fn parse(s: &str) -> Option<Decision> {
        [
            Decision::Allowed,
            Decision::RejectedAuthn,
            Decision::RejectedAuthz,
            Decision::RejectedPolicy,
            Decision::Error,
        ]
        .into_iter()
        .find(|d| d.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    /// Arrival order at the gateway, starting at 1.
    pub seq: u64,
    pub trace_id: String,
    pub timestamp: Timestamp,
    pub user_id: String,
    pub project_id: String,
    pub method: String,
    pub path: String,
    pub decision: Decision,
    pub status_code: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_id: Option<String>,
    pub detail: String,
    pub latency_ms: f64,
}

/// Conjunctive filter; `None` fields match everything.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditFilter {
    pub project_id: Option<String>,
    pub user_id: Option<String>,
    pub decision: Option<Decision>,
}

impl AuditFilter {
    pub fn matches(&self, r: &AuditRecord) -> bool {
        self.project_id.as_ref().is_none_or(|p| p == &r.project_id)
            && self.user_id.as_ref().is_none_or(|u| u == &r.user_id)
            && self.decision.is_none_or(|d| d == r.decision)
    }
}

/// Append-only audit log, optionally mirrored to a JSON-lines sink.
#[derive(Default)]
pub struct AuditLog {
    records: Mutex<Vec<AuditRecord>>,
    sink: Mutex<Option<Box<dyn Write + Send>>>,
}

impl std::fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuditLog")
            .field("records", &self.records.lock().len())
            .finish_non_exhaustive()
    }
}

impl AuditLog {
    pub fn with_sink(sink: Box<dyn Write + Send>) -> Self {
        AuditLog {
            records: Mutex::default(),
            sink: Mutex::new(Some(sink)),
        }
    }

    pub fn append(&self, record: AuditRecord) {
        if let Some(sink) = self.sink.lock().as_mut() {
            let line = serde_json::to_string(&record).expect("audit record serializes");
            if let Err(e) = writeln!(sink, "{line}").and_then(|_| sink.flush()) {
                log::warn!("audit sink write failed: {e}");
            }
        }
        self.records.lock().push(record);
    }

    pub fn len(&self) -> usize {
        self.records.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Matching records in arrival order.
    pub fn query(&self, filter: &AuditFilter) -> Vec<AuditRecord> {
        let mut out: Vec<AuditRecord> = self
            .records
            .lock()
            .iter()
            .filter(|r| filter.matches(r))
            .cloned()
            .collect();
        out.sort_by_key(|r| r.seq);
        out
    }

    pub fn all(&self) -> Vec<AuditRecord> {
        self.query(&AuditFilter::default())
    }

    /// Matching records as JSON lines.
    pub fn export_jsonl(&self, filter: &AuditFilter) -> String {
        self.query(filter)
            .iter()
            .map(|r| serde_json::to_string(r).expect("audit record serializes") + "\n")
            .collect()
    }
}
