//! Projects, allocations and the conjunctive access rule the gateway consults
//! before dispatching any request.
//!
//! Allocations are kept as integer node-milliseconds internally so that
//! charge/refund sequences replay exactly; the public surface speaks
//! node-hours.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::error::{Classify, ErrorKind};
use crate::scope::Scope;
use crate::tokens::{AuthContext, Claims};

const MS_PER_HOUR: f64 = 3_600_000.0;

/// Allocation quantity in node-milliseconds. Serialized as node-hours.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Units(u64);

impl Units {
    pub const ZERO: Units = Units(0);

    pub const fn from_node_millis(ms: u64) -> Self {
        Units(ms)
    }

    pub fn from_node_hours(hours: f64) -> Self {
        Units((hours.max(0.0) * MS_PER_HOUR).round() as u64)
    }

    /// `nodes` held for `d`.
    pub fn for_nodes(nodes: u64, d: Duration) -> Self {
        Units(nodes.saturating_mul(d.as_millis() as u64))
    }

    pub const fn node_millis(self) -> u64 {
        self.0
    }

    pub fn node_hours(self) -> f64 {
        self.0 as f64 / MS_PER_HOUR
    }

    pub fn checked_add(self, o: Units) -> Option<Units> {
        self.0.checked_add(o.0).map(Units)
    }

    pub fn checked_sub(self, o: Units) -> Option<Units> {
        self.0.checked_sub(o.0).map(Units)
    }

    pub fn saturating_sub(self, o: Units) -> Units {
        Units(self.0.saturating_sub(o.0))
    }
}

impl fmt::Debug for Units {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}nh", self.node_hours())
    }
}

impl fmt::Display for Units {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} node-hours", self.node_hours())
    }
}

impl std::iter::Sum for Units {
    fn sum<I: Iterator<Item = Units>>(iter: I) -> Self {
        Units(iter.map(|u| u.0).sum())
    }
}

impl Serialize for Units {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.node_hours())
    }
}

impl<'de> Deserialize<'de> for Units {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let h = f64::deserialize(d)?;
        if !h.is_finite() || h < 0.0 {
            return Err(serde::de::Error::custom("units must be a nonnegative number"));
        }
        Ok(Units::from_node_hours(h))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Allocation {
    pub total_units: Units,
    pub consumed_units: Units,
}

impl Allocation {
    pub fn remaining(&self) -> Units {
        self.total_units.saturating_sub(self.consumed_units)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationSpec {
    pub resource_id: String,
    pub total_units: Units,
}

impl AllocationSpec {
    pub fn new(resource_id: impl Into<String>, node_hours: f64) -> Self {
        AllocationSpec {
            resource_id: resource_id.into(),
            total_units: Units::from_node_hours(node_hours),
        }
    }
}

/// One project entry of a policy document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectSpec {
    pub project_id: String,
    pub members: BTreeSet<String>,
    #[serde(default)]
    pub resource_acl: BTreeSet<String>,
    #[serde(default)]
    pub allocations: Vec<AllocationSpec>,
}

impl ProjectSpec {
    pub fn new<'a>(
        project_id: &str,
        members: impl IntoIterator<Item = &'a str>,
        acl: impl IntoIterator<Item = &'a str>,
        allocations: impl IntoIterator<Item = AllocationSpec>,
    ) -> Self {
        ProjectSpec {
            project_id: project_id.to_string(),
            members: members.into_iter().map(str::to_string).collect(),
            resource_acl: acl.into_iter().map(str::to_string).collect(),
            allocations: allocations.into_iter().collect(),
        }
    }
}

/// `{ "projects": [ ... ] }`
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyDocument {
    pub projects: Vec<ProjectSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PolicyDecision {
    pub allowed: bool,
    pub rule_id: &'static str,
    pub reason: String,
}

impl PolicyDecision {
    fn allow() -> Self {
        PolicyDecision {
            allowed: true,
            rule_id: "allow",
            reason: String::new(),
        }
    }

    fn deny(rule_id: &'static str, reason: String) -> Self {
        PolicyDecision {
            allowed: false,
            rule_id,
            reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("project {0:?} already registered")]
    DuplicateProject(String),
    #[error("project {0:?} must have at least one member")]
    EmptyMembers(String),
    #[error("unknown project {0:?}")]
    UnknownProject(String),
    #[error("allocation exhausted for {project}/{resource}: requested {requested}, remaining {remaining}")]
    Overdraft {
        project: String,
        resource: String,
        requested: Units,
        remaining: Units,
    },
    #[error("refund of {requested} exceeds consumed {consumed} for {project}/{resource}")]
    OverRefund {
        project: String,
        resource: String,
        requested: Units,
        consumed: Units,
    },
    #[error("missing required scope {0}")]
    InsufficientScope(Scope),
}

impl Classify for PolicyError {
    fn kind(&self) -> ErrorKind {
        match self {
            PolicyError::DuplicateProject(_) => ErrorKind::Conflict,
            PolicyError::EmptyMembers(_) => ErrorKind::BadRequest,
            PolicyError::UnknownProject(_) => ErrorKind::NotFound,
            PolicyError::Overdraft { .. } => ErrorKind::PolicyDenied,
            PolicyError::OverRefund { .. } => ErrorKind::Conflict,
            PolicyError::InsufficientScope(_) => ErrorKind::Forbidden,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            PolicyError::DuplicateProject(_) => "duplicate_project",
            PolicyError::EmptyMembers(_) => "empty_members",
            PolicyError::UnknownProject(_) => "unknown_project",
            PolicyError::Overdraft { .. } => "allocation_exhausted",
            PolicyError::OverRefund { .. } => "over_refund",
            PolicyError::InsufficientScope(_) => "insufficient_scope",
        }
    }
}

#[derive(Debug)]
struct ProjectEntry {
    members: BTreeSet<String>,
    resource_acl: BTreeSet<String>,
    allocations: BTreeMap<String, Mutex<Allocation>>,
}

impl ProjectEntry {
    fn allocation(&self, resource_id: &str) -> Allocation {
        self.allocations
            .get(resource_id)
            .map(|a| *a.lock())
            .unwrap_or(Allocation {
                total_units: Units::ZERO,
                consumed_units: Units::ZERO,
            })
    }
}

/// Read-only view of a registered project.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProjectView {
    pub project_id: String,
    pub members: BTreeSet<String>,
    pub resource_acl: BTreeSet<String>,
    pub allocations: BTreeMap<String, Allocation>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerOp {
    Consume,
    Release,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LedgerEntry {
    pub project_id: String,
    pub resource_id: String,
    pub op: LedgerOp,
    pub units: Units,
}

#[derive(Debug, Default)]
pub struct PolicyEngine {
    projects: RwLock<BTreeMap<String, Arc<ProjectEntry>>>,
    ledger: Mutex<Vec<LedgerEntry>>,
}

impl PolicyEngine {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers every project in `doc`. Fails on the first invalid entry;
    /// entries before it stay registered.
    pub fn load(&self, doc: &PolicyDocument) -> Result<(), PolicyError> {
        doc.projects.iter().try_for_each(|p| self.insert(p.clone()))
    }

    pub fn register_project(&self, admin: &AuthContext, project: ProjectSpec) -> Result<(), PolicyError> {
        if !admin.has_scope(Scope::TokensManage) {
            return Err(PolicyError::InsufficientScope(Scope::TokensManage));
        }
        self.insert(project)
    }

    fn insert(&self, p: ProjectSpec) -> Result<(), PolicyError> {
        if p.members.is_empty() {
            return Err(PolicyError::EmptyMembers(p.project_id));
        }
        let mut projects = self.projects.write();
        if projects.contains_key(&p.project_id) {
            return Err(PolicyError::DuplicateProject(p.project_id));
        }
        let allocations = p
            .allocations
            .into_iter()
            .map(|a| {
                (
                    a.resource_id,
                    Mutex::new(Allocation {
                        total_units: a.total_units,
                        consumed_units: Units::ZERO,
                    }),
                )
            })
            .collect();
        log::info!("registered project {}", p.project_id);
        projects.insert(
            p.project_id,
            Arc::new(ProjectEntry {
                members: p.members,
                resource_acl: p.resource_acl,
                allocations,
            }),
        );
        Ok(())
    }

    pub fn is_registered(&self, project_id: &str) -> bool {
        self.projects.read().contains_key(project_id)
    }

    fn entry(&self, project_id: &str) -> Option<Arc<ProjectEntry>> {
        self.projects.read().get(project_id).cloned()
    }

    pub fn project(&self, project_id: &str) -> Option<ProjectView> {
        let e = self.entry(project_id)?;
        Some(ProjectView {
            project_id: project_id.to_string(),
            members: e.members.clone(),
            resource_acl: e.resource_acl.clone(),
            allocations: e.allocations.iter().map(|(k, v)| (k.clone(), *v.lock())).collect(),
        })
    }

    pub fn projects(&self) -> Vec<ProjectView> {
        let ids: Vec<String> = self.projects.read().keys().cloned().collect();
        ids.iter().filter_map(|id| self.project(id)).collect()
    }

    pub fn allocation(&self, project_id: &str, resource_id: &str) -> Option<Allocation> {
        self.entry(project_id).map(|e| e.allocation(resource_id))
    }

    /// Full five-way check: project registered, caller is a member, resource
    /// in the project's ACL, action in the token's scopes, cost fits the
    /// remaining allocation. Never mutates state.
    pub fn evaluate(&self, claims: &Claims, resource_id: &str, action: Scope, cost: Units) -> PolicyDecision {
        let entry = match self.membership(claims, action) {
            Ok(e) => e,
            Err(d) => return d,
        };
        if !entry.resource_acl.contains(resource_id) {
            return PolicyDecision::deny(
                "resource_not_permitted",
                format!("resource {resource_id:?} not in ACL of project {:?}", claims.project_id),
            );
        }
        let alloc = entry.allocation(resource_id);
        match alloc.consumed_units.checked_add(cost) {
            Some(after) if after <= alloc.total_units => PolicyDecision::allow(),
            _ => PolicyDecision::deny(
                "allocation_exhausted",
                format!("cost {cost} exceeds remaining {} on {resource_id:?}", alloc.remaining()),
            ),
        }
    }

    /// Project-level check for requests not tied to a single resource:
    /// project registered, caller is a member, action in scopes.
    pub fn evaluate_access(&self, claims: &Claims, action: Scope) -> PolicyDecision {
        match self.membership(claims, action) {
            Ok(_) => PolicyDecision::allow(),
            Err(d) => d,
        }
    }

    fn membership(&self, claims: &Claims, action: Scope) -> Result<Arc<ProjectEntry>, PolicyDecision> {
        let Some(entry) = self.entry(&claims.project_id) else {
            return Err(PolicyDecision::deny(
                "unknown_project",
                format!("project {:?} is not registered", claims.project_id),
            ));
        };
        if !entry.members.contains(&claims.user_id) {
            return Err(PolicyDecision::deny(
                "not_member",
                format!("user {:?} is not a member of {:?}", claims.user_id, claims.project_id),
            ));
        }
        if !claims.scopes.contains(action) {
            return Err(PolicyDecision::deny(
                "scope_missing",
                format!("action {action} not granted by token"),
            ));
        }
        Ok(entry)
    }

    pub fn consume(&self, project_id: &str, resource_id: &str, cost: Units) -> Result<Allocation, PolicyError> {
        let entry = self
            .entry(project_id)
            .ok_or_else(|| PolicyError::UnknownProject(project_id.to_string()))?;
        let Some(slot) = entry.allocations.get(resource_id) else {
            if cost == Units::ZERO {
                return Ok(entry.allocation(resource_id));
            }
            return Err(PolicyError::Overdraft {
                project: project_id.to_string(),
                resource: resource_id.to_string(),
                requested: cost,
                remaining: Units::ZERO,
            });
        };
        let mut alloc = slot.lock();
        match alloc.consumed_units.checked_add(cost) {
            Some(after) if after <= alloc.total_units => {
                alloc.consumed_units = after;
                self.record(project_id, resource_id, LedgerOp::Consume, cost);
                Ok(*alloc)
            }
            _ => Err(PolicyError::Overdraft {
                project: project_id.to_string(),
                resource: resource_id.to_string(),
                requested: cost,
                remaining: alloc.remaining(),
            }),
        }
    }

    pub fn release(&self, project_id: &str, resource_id: &str, units: Units) -> Result<Allocation, PolicyError> {
        let entry = self
            .entry(project_id)
            .ok_or_else(|| PolicyError::UnknownProject(project_id.to_string()))?;
        let over = |consumed| PolicyError::OverRefund {
            project: project_id.to_string(),
            resource: resource_id.to_string(),
            requested: units,
            consumed,
        };
        let Some(slot) = entry.allocations.get(resource_id) else {
            if units == Units::ZERO {
                return Ok(entry.allocation(resource_id));
            }
            return Err(over(Units::ZERO));
        };
        let mut alloc = slot.lock();
        let after = alloc
            .consumed_units
            .checked_sub(units)
            .ok_or_else(|| over(alloc.consumed_units))?;
        alloc.consumed_units = after;
        self.record(project_id, resource_id, LedgerOp::Release, units);
        Ok(*alloc)
    }

    fn record(&self, project_id: &str, resource_id: &str, op: LedgerOp, units: Units) {
        if units == Units::ZERO {
            return;
        }
        self.ledger.lock().push(LedgerEntry {
            project_id: project_id.to_string(),
            resource_id: resource_id.to_string(),
            op,
            units,
        });
    }

    /// Every nonzero consume/release applied so far, in application order.
    pub fn ledger(&self) -> Vec<LedgerEntry> {
        self.ledger.lock().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scope::ScopeSet;
    use crate::time::Timestamp;

    fn claims(user: &str, project: &str, scopes: ScopeSet) -> Claims {
        Claims {
            token_id: "t".into(),
            user_id: user.into(),
            project_id: project.into(),
            scopes,
            issued_at: Timestamp(0),
            expires_at: Timestamp(1),
        }
    }

    fn engine() -> PolicyEngine {
        let p = PolicyEngine::new();
        p.load(&PolicyDocument {
            projects: vec![
                ProjectSpec::new(
                    "proj-a",
                    ["alice"],
                    ["frontier"],
                    [AllocationSpec::new("frontier", 100.0)],
                ),
                ProjectSpec::new("proj-b", ["bob"], ["frontier"], [AllocationSpec::new("frontier", 5.0)]),
                ProjectSpec::new("proj-c", ["carol"], ["andes"], [AllocationSpec::new("andes", 1.0)]),
            ],
        })
        .unwrap();
        p
    }

    fn h(x: f64) -> Units {
        Units::from_node_hours(x)
    }

    #[test]
    fn all_pass_allows() {
        let p = engine();
        let c = claims("alice", "proj-a", ScopeSet::from([Scope::ComputeSubmit]));
        let d = p.evaluate(&c, "frontier", Scope::ComputeSubmit, Units::ZERO);
        assert!(d.allowed, "{d:?}");
        assert_eq!(d.rule_id, "allow");
    }

    #[test]
    fn over_budget_denies_with_rule() {
        let p = engine();
        let c = claims("alice", "proj-a", ScopeSet::from([Scope::ComputeSubmit]));
        let d = p.evaluate(&c, "frontier", Scope::ComputeSubmit, h(100.5));
        assert!(!d.allowed);
        assert_eq!(d.rule_id, "allocation_exhausted");
        assert!(!d.reason.is_empty());
        // boundary: exactly the remaining amount is allowed
        assert!(p.evaluate(&c, "frontier", Scope::ComputeSubmit, h(100.0)).allowed);
    }

    #[test]
    fn duplicate_and_empty_registration() {
        let p = engine();
        let err = p.load(&PolicyDocument {
            projects: vec![ProjectSpec::new("proj-a", ["x"], [], [])],
        });
        assert_eq!(err.unwrap_err(), PolicyError::DuplicateProject("proj-a".into()));
        let err = p.load(&PolicyDocument {
            projects: vec![ProjectSpec::new("proj-z", [], [], [])],
        });
        assert_eq!(err.unwrap_err(), PolicyError::EmptyMembers("proj-z".into()));
        assert!(!p.is_registered("proj-z"));
    }

    #[test]
    fn projects_see_only_their_allocations() {
        let p = engine();
        p.consume("proj-a", "frontier", h(7.0)).unwrap();
        assert_eq!(p.allocation("proj-a", "frontier").unwrap().consumed_units, h(7.0));
        assert_eq!(p.allocation("proj-b", "frontier").unwrap().consumed_units, Units::ZERO);
        assert_eq!(p.allocation("proj-b", "frontier").unwrap().total_units, h(5.0));
        assert_eq!(p.allocation("proj-c", "frontier").unwrap().total_units, Units::ZERO);
        assert_eq!(p.allocation("proj-c", "andes").unwrap().total_units, h(1.0));
    }

    #[test]
    fn evaluate_does_not_consume() {
        let p = engine();
        let c = claims("alice", "proj-a", ScopeSet::from([Scope::ComputeSubmit]));
        for _ in 0..10 {
            assert!(p.evaluate(&c, "frontier", Scope::ComputeSubmit, h(60.0)).allowed);
        }
        assert_eq!(p.allocation("proj-a", "frontier").unwrap().consumed_units, Units::ZERO);
    }

    #[test]
    fn consume_boundaries() {
        let p = engine();
        let before = p.allocation("proj-a", "frontier").unwrap();
        assert_eq!(p.consume("proj-a", "frontier", Units::ZERO).unwrap(), before);
        p.consume("proj-a", "frontier", h(60.0)).unwrap();
        let a = p.consume("proj-a", "frontier", h(40.0)).unwrap();
        assert_eq!(a.consumed_units, h(100.0));
        let err = p.consume("proj-a", "frontier", h(1.0)).unwrap_err();
        assert!(matches!(err, PolicyError::Overdraft { .. }));
        assert_eq!(p.allocation("proj-a", "frontier").unwrap().consumed_units, h(100.0));
    }

    #[test]
    fn release_inverse_and_over_refund() {
        let p = engine();
        assert!(matches!(
            p.release("proj-a", "frontier", h(1.0)).unwrap_err(),
            PolicyError::OverRefund { .. }
        ));
        p.consume("proj-a", "frontier", h(10.0)).unwrap();
        let a = p.release("proj-a", "frontier", h(10.0)).unwrap();
        assert_eq!(a.consumed_units, Units::ZERO);
        assert_eq!(p.ledger().len(), 2);
    }

    #[test]
    fn concurrent_consumes_never_overdraw() {
        let p = Arc::new(PolicyEngine::new());
        p.load(&PolicyDocument {
            projects: vec![ProjectSpec::new("x", ["u"], ["r"], [AllocationSpec::new("r", 40.0)])],
        })
        .unwrap();
        let handles: Vec<_> = (0..50)
            .map(|_| {
                let p = p.clone();
                std::thread::spawn(move || p.consume("x", "r", h(1.0)).is_ok())
            })
            .collect();
        let ok = handles.into_iter().map(|h| h.join().unwrap()).filter(|b| *b).count();
        assert_eq!(ok, 40);
        assert_eq!(p.allocation("x", "r").unwrap().consumed_units, h(40.0));
    }

    #[test]
    fn units_round_trip_json() {
        let u: Units = serde_json::from_str("2.5").unwrap();
        assert_eq!(u, Units::for_nodes(5, Duration::from_secs(1800)));
        assert_eq!(serde_json::to_string(&u).unwrap(), "2.5");
        assert!(serde_json::from_str::<Units>("-1").is_err());
    }
}
