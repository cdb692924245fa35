//! Resource inventory, scheduled downtimes and runtime environments.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Classify, ErrorKind};
use crate::scope::Scope;
use crate::time::{Clock, Timestamp};
use crate::tokens::AuthContext;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ResourceState {
    Up,
    Degraded,
    Down,
    Maintenance,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ResourceStatus {
    pub resource_id: String,
    pub state: ResourceState,
    pub detail: String,
    pub updated_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SystemStatus {
    pub overall: ResourceState,
    pub resources: Vec<ResourceStatus>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Downtime {
    pub downtime_id: String,
    pub resource_id: String,
    pub start: Timestamp,
    pub end: Timestamp,
    pub reason: String,
}

impl Downtime {
    pub fn covers(&self, t: Timestamp) -> bool {
        self.start <= t && t < self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Runtime {
    pub name: String,
    pub versions: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    #[serde(default)]
    pub runtimes: Vec<Runtime>,
    #[serde(default)]
    pub default_modules: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EnvironmentInfo {
    pub resource_id: String,
    #[serde(flatten)]
    pub environment: EnvironmentSpec,
}

fn default_state() -> ResourceState {
    ResourceState::Up
}

/// One entry of the facility-config file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceConfig {
    pub resource_id: String,
    #[serde(default = "default_state")]
    pub state: ResourceState,
    #[serde(default)]
    pub detail: String,
    /// Schedulable node count; 0 means the resource takes no compute jobs.
    #[serde(default)]
    pub nodes: u32,
    #[serde(default)]
    pub environment: EnvironmentSpec,
}

impl ResourceConfig {
    pub fn compute(resource_id: &str, nodes: u32) -> Self {
        ResourceConfig {
            resource_id: resource_id.to_string(),
            state: ResourceState::Up,
            detail: String::new(),
            nodes,
            environment: EnvironmentSpec::default(),
        }
    }
}

/// `{ "resources": [ ... ] }`
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FacilityDocument {
    pub resources: Vec<ResourceConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FacilityError {
    #[error("unknown resource {0:?}")]
    UnknownResource(String),
    #[error("downtime window must satisfy start < end")]
    InvertedWindow,
    #[error("duplicate resource {0:?}")]
    DuplicateResource(String),
    #[error("runtime {runtime:?} on {resource:?} lists no versions")]
    EmptyVersions { resource: String, runtime: String },
    #[error("MAINTENANCE is derived from downtimes and cannot be stored")]
    StoredMaintenance,
    #[error("missing required scope {0}")]
    InsufficientScope(Scope),
}

impl Classify for FacilityError {
    fn kind(&self) -> ErrorKind {
        match self {
            FacilityError::UnknownResource(_) => ErrorKind::NotFound,
            FacilityError::InvertedWindow | FacilityError::EmptyVersions { .. } | FacilityError::StoredMaintenance => {
                ErrorKind::BadRequest
            }
            FacilityError::DuplicateResource(_) => ErrorKind::Conflict,
            FacilityError::InsufficientScope(_) => ErrorKind::Forbidden,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            FacilityError::UnknownResource(_) => "unknown_resource",
            FacilityError::InvertedWindow => "inverted_window",
            FacilityError::DuplicateResource(_) => "duplicate_resource",
            FacilityError::EmptyVersions { .. } => "empty_versions",
            FacilityError::StoredMaintenance => "stored_maintenance",
            FacilityError::InsufficientScope(_) => "insufficient_scope",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct ResourceEntry {
    state: ResourceState,
    detail: String,
    updated_at: Timestamp,
    nodes: u32,
    environment: EnvironmentSpec,
}

#[derive(Debug)]
pub struct Facility {
    clock: Arc<dyn Clock>,
    resources: RwLock<BTreeMap<String, ResourceEntry>>,
    downtimes: RwLock<BTreeMap<String, Vec<Downtime>>>,
    next_downtime: AtomicU64,
}

fn check_env(resource: &str, env: &EnvironmentSpec) -> Result<(), FacilityError> {
    match env.runtimes.iter().find(|r| r.versions.is_empty()) {
        Some(r) => Err(FacilityError::EmptyVersions {
            resource: resource.to_string(),
            runtime: r.name.clone(),
        }),
        None => Ok(()),
    }
}

impl Facility {
    pub fn new(doc: &FacilityDocument, clock: Arc<dyn Clock>) -> Result<Self, FacilityError> {
        let now = clock.now();
        let mut resources = BTreeMap::new();
        for r in &doc.resources {
            if r.state == ResourceState::Maintenance {
                return Err(FacilityError::StoredMaintenance);
            }
            check_env(&r.resource_id, &r.environment)?;
            let entry = ResourceEntry {
                state: r.state,
                detail: r.detail.clone(),
                updated_at: now,
                nodes: r.nodes,
                environment: r.environment.clone(),
            };
            if resources.insert(r.resource_id.clone(), entry).is_some() {
                return Err(FacilityError::DuplicateResource(r.resource_id.clone()));
            }
        }
        Ok(Facility {
            clock,
            resources: RwLock::new(resources),
            downtimes: RwLock::default(),
            next_downtime: AtomicU64::new(1),
        })
    }

    pub fn contains(&self, resource_id: &str) -> bool {
        self.resources.read().contains_key(resource_id)
    }

    /// `(resource_id, nodes)` for every resource that accepts compute jobs.
    pub fn compute_resources(&self) -> Vec<(String, u32)> {
        self.resources
            .read()
            .iter()
            .filter(|(_, e)| e.nodes > 0)
            .map(|(k, e)| (k.clone(), e.nodes))
            .collect()
    }

    fn in_downtime(&self, resource_id: &str, now: Timestamp) -> bool {
        self.downtimes
            .read()
            .get(resource_id)
            .is_some_and(|ds| ds.iter().any(|d| d.covers(now)))
    }

    fn status_of(&self, resource_id: &str, e: &ResourceEntry, now: Timestamp) -> ResourceStatus {
        let (state, detail) = if self.in_downtime(resource_id, now) {
            (ResourceState::Maintenance, "scheduled downtime in progress".to_string())
        } else {
            (e.state, e.detail.clone())
        };
        ResourceStatus {
            resource_id: resource_id.to_string(),
            state,
            detail,
            updated_at: e.updated_at,
        }
    }

    pub fn resource_state(&self, resource_id: &str, now: Timestamp) -> Option<ResourceState> {
        let resources = self.resources.read();
        let e = resources.get(resource_id)?;
        Some(self.status_of(resource_id, e, now).state)
    }

    pub fn resource_status(&self, resource_id: &str, now: Timestamp) -> Result<ResourceStatus, FacilityError> {
        let resources = self.resources.read();
        let e = resources
            .get(resource_id)
            .ok_or_else(|| FacilityError::UnknownResource(resource_id.to_string()))?;
        Ok(self.status_of(resource_id, e, now))
    }

    pub fn get_system_status(&self, now: Timestamp) -> SystemStatus {
        let resources: Vec<_> = self
            .resources
            .read()
            .iter()
            .map(|(k, e)| self.status_of(k, e, now))
            .collect();
        let overall = if resources.iter().all(|r| r.state == ResourceState::Up) {
            ResourceState::Up
        } else if resources
            .iter()
            .all(|r| matches!(r.state, ResourceState::Down | ResourceState::Maintenance))
        {
            ResourceState::Down
        } else {
            ResourceState::Degraded
        };
        SystemStatus { overall, resources }
    }

    pub fn schedule_downtime(
        &self,
        admin: &AuthContext,
        resource_id: &str,
        start: Timestamp,
        end: Timestamp,
        reason: &str,
    ) -> Result<Downtime, FacilityError> {
        if !admin.has_scope(Scope::TokensManage) {
            return Err(FacilityError::InsufficientScope(Scope::TokensManage));
        }
        if !self.contains(resource_id) {
            return Err(FacilityError::UnknownResource(resource_id.to_string()));
        }
        if start >= end {
            return Err(FacilityError::InvertedWindow);
        }
        let d = Downtime {
            downtime_id: format!("dt-{:06}", self.next_downtime.fetch_add(1, Ordering::Relaxed)),
            resource_id: resource_id.to_string(),
            start,
            end,
            reason: reason.to_string(),
        };
        self.downtimes
            .write()
            .entry(resource_id.to_string())
            .or_default()
            .push(d.clone());
        Ok(d)
    }

    pub fn list_downtimes(&self, resource_id: &str) -> Result<Vec<Downtime>, FacilityError> {
        if !self.contains(resource_id) {
            return Err(FacilityError::UnknownResource(resource_id.to_string()));
        }
        Ok(self.downtimes.read().get(resource_id).cloned().unwrap_or_default())
    }

    pub fn get_environment(&self, resource_id: &str) -> Result<EnvironmentInfo, FacilityError> {
        let resources = self.resources.read();
        let e = resources
            .get(resource_id)
            .ok_or_else(|| FacilityError::UnknownResource(resource_id.to_string()))?;
        Ok(EnvironmentInfo {
            resource_id: resource_id.to_string(),
            environment: e.environment.clone(),
        })
    }

    /// Operator override of a resource's stored state.
    pub fn set_state(&self, resource_id: &str, state: ResourceState, detail: &str) -> Result<(), FacilityError> {
        if state == ResourceState::Maintenance {
            return Err(FacilityError::StoredMaintenance);
        }
        let now = self.clock.now();
        let mut resources = self.resources.write();
        let e = resources
            .get_mut(resource_id)
            .ok_or_else(|| FacilityError::UnknownResource(resource_id.to_string()))?;
        e.state = state;
        e.detail = detail.to_string();
        e.updated_at = now;
        Ok(())
    }

    pub fn set_environment(&self, resource_id: &str, env: EnvironmentSpec) -> Result<(), FacilityError> {
        check_env(resource_id, &env)?;
        let mut resources = self.resources.write();
        let e = resources
            .get_mut(resource_id)
            .ok_or_else(|| FacilityError::UnknownResource(resource_id.to_string()))?;
        e.environment = env;
        Ok(())
    }

    /// SHA-256 over the full module state. Used to show reads are side-effect free.
    pub fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&*self.resources.read()).expect("serialize"));
        h.update(serde_json::to_vec(&*self.downtimes.read()).expect("serialize"));
        h.update(self.next_downtime.load(Ordering::SeqCst).to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::ManualClock;

    fn facility(states: &[(&str, ResourceState)]) -> Facility {
        let doc = FacilityDocument {
            resources: states
                .iter()
                .map(|(id, s)| ResourceConfig {
                    state: *s,
                    ..ResourceConfig::compute(id, 4)
                })
                .collect(),
        };
        Facility::new(&doc, Arc::new(ManualClock::new(Timestamp(0)))).unwrap()
    }

    #[test]
    fn overall_aggregation() {
        use ResourceState::*;
        let f = facility(&[("a", Up), ("b", Up), ("c", Up)]);
        assert_eq!(f.get_system_status(Timestamp(0)).overall, Up);
        let f = facility(&[("a", Up), ("b", Down), ("c", Up)]);
        assert_eq!(f.get_system_status(Timestamp(0)).overall, Degraded);
        let f = facility(&[("a", Down), ("b", Down)]);
        assert_eq!(f.get_system_status(Timestamp(0)).overall, Down);
        let f = facility(&[("a", Degraded)]);
        assert_eq!(f.get_system_status(Timestamp(0)).overall, Degraded);
    }

    #[test]
    fn stored_maintenance_rejected() {
        let doc = FacilityDocument {
            resources: vec![ResourceConfig {
                state: ResourceState::Maintenance,
                ..ResourceConfig::compute("a", 1)
            }],
        };
        let err = Facility::new(&doc, Arc::new(ManualClock::default())).unwrap_err();
        assert_eq!(err, FacilityError::StoredMaintenance);
    }

    #[test]
    fn empty_version_list_rejected() {
        let mut r = ResourceConfig::compute("a", 1);
        r.environment.runtimes.push(Runtime {
            name: "python".into(),
            versions: vec![],
        });
        let doc = FacilityDocument { resources: vec![r] };
        assert!(matches!(
            Facility::new(&doc, Arc::new(ManualClock::default())).unwrap_err(),
            FacilityError::EmptyVersions { .. }
        ));
    }

    #[test]
    fn downtime_covers_half_open_window() {
        let d = Downtime {
            downtime_id: "d".into(),
            resource_id: "a".into(),
            start: Timestamp(10),
            end: Timestamp(20),
            reason: String::new(),
        };
        assert!(!d.covers(Timestamp(9)));
        assert!(d.covers(Timestamp(10)));
        assert!(d.covers(Timestamp(19)));
        assert!(!d.covers(Timestamp(20)));
    }
}
