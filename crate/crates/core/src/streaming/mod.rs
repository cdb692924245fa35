//! Streaming clusters: the `/streaming` endpoint family.
//!
//! [`StreamingService`] is the stream manager. It validates requests, charges
//! allocation and keeps the cluster records; actual broker deployment is
//! delegated to a [`BrokerProvisioner`].

pub mod broker;
pub mod provisioner;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::error::{Classify, ErrorKind};
use crate::policy::{PolicyEngine, PolicyError, Units};
use crate::scope::Scope;
use crate::time::{Clock, Timestamp};
use crate::tokens::AuthContext;

pub use broker::{Broker, BrokerConfig, BrokerError, Message, Subscription};
pub use provisioner::{
    endpoint_for, parse_endpoint, BrokerProvisioner, DeploymentSpec, EmbeddedProvisioner, ProvisionError, ServiceFlavor,
};

/// Allocation resource id charged for streaming clusters.
pub const STREAMING_RESOURCE: &str = "streaming";

pub const DEFAULT_MAX_LEASE: Duration = Duration::from_secs(24 * 3600);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterRequest {
    #[serde(default = "default_flavor")]
    pub service_name: ServiceFlavor,
    pub cluster_name: String,
    pub node_count: u32,
    pub cpu_count: u32,
    pub ram_gib: f64,
}

fn default_flavor() -> ServiceFlavor {
    ServiceFlavor::Rabbitmq
}

impl ClusterRequest {
    pub fn new(cluster_name: &str, node_count: u32, cpu_count: u32, ram_gib: f64) -> Self {
        ClusterRequest {
            service_name: ServiceFlavor::Rabbitmq,
            cluster_name: cluster_name.to_string(),
            node_count,
            cpu_count,
            ram_gib,
        }
    }
}

/// Lowercase alphanumerics and hyphens, 1 to 63 chars, no leading or trailing hyphen.
pub fn valid_cluster_name(name: &str) -> bool {
    let b = name.as_bytes();
    (1..=63).contains(&b.len())
        && b.iter()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || *c == b'-')
        && b[0] != b'-'
        && b[b.len() - 1] != b'-'
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ClusterState {
    Provisioning,
    Running,
    Stopping,
    Stopped,
    Failed,
}

impl ClusterState {
    pub fn can_transition_to(self, next: ClusterState) -> bool {
        use ClusterState::*;
        matches!(
            (self, next),
            (Provisioning, Running) | (Provisioning, Failed) | (Running, Stopping) | (Stopping, Stopped)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, ClusterState::Stopped | ClusterState::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StreamingCluster {
    pub cluster_name: String,
    pub project_id: String,
    pub request: ClusterRequest,
    pub state: ClusterState,
    /// Set only while RUNNING.
    pub endpoint: Option<String>,
    pub created_at: Timestamp,
    pub stopped_at: Option<Timestamp>,
    pub lease_expires_at: Timestamp,
    pub detail: String,
    pub charged_units: Units,
    pub refunded_units: Units,
    /// Every state the cluster has been in, in order.
    pub history: Vec<ClusterState>,
}

impl StreamingCluster {
    fn transition(&mut self, next: ClusterState) {
        debug_assert!(self.state.can_transition_to(next), "{:?} -> {next:?}", self.state);
        self.state = next;
        self.history.push(next);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StreamingError {
    #[error("invalid cluster name {0:?}: use 1-63 lowercase letters, digits or '-', not starting or ending with '-'")]
    InvalidName(String),
    #[error("invalid cluster size: {0}")]
    InvalidSize(&'static str),
    #[error("cluster {0:?} already exists in this project")]
    Duplicate(String),
    #[error("cluster {0:?} not found")]
    NotFound(String),
    #[error("cluster {name:?} is {state:?}")]
    Conflict { name: String, state: ClusterState },
    #[error("unknown endpoint {0:?}")]
    UnknownEndpoint(String),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Allocation(#[from] PolicyError),
    #[error("missing required scope {0}")]
    InsufficientScope(Scope),
}

impl Classify for StreamingError {
    fn kind(&self) -> ErrorKind {
        match self {
            StreamingError::InvalidName(_) | StreamingError::InvalidSize(_) => ErrorKind::BadRequest,
            StreamingError::Duplicate(_) | StreamingError::Conflict { .. } => ErrorKind::Conflict,
            StreamingError::NotFound(_) | StreamingError::UnknownEndpoint(_) => ErrorKind::NotFound,
            StreamingError::Broker(BrokerError::ClusterStopped) => ErrorKind::Conflict,
            StreamingError::Broker(BrokerError::Oversize { .. }) => ErrorKind::BadRequest,
            StreamingError::Broker(BrokerError::Backpressure { .. }) => ErrorKind::Unavailable,
            StreamingError::Allocation(e) => e.kind(),
            StreamingError::InsufficientScope(_) => ErrorKind::Forbidden,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            StreamingError::InvalidName(_) => "invalid_name",
            StreamingError::InvalidSize(_) => "invalid_size",
            StreamingError::Duplicate(_) => "duplicate_cluster",
            StreamingError::NotFound(_) => "not_found",
            StreamingError::Conflict { .. } => "conflict",
            StreamingError::UnknownEndpoint(_) => "unknown_endpoint",
            StreamingError::Broker(BrokerError::ClusterStopped) => "cluster_stopped",
            StreamingError::Broker(BrokerError::Oversize { .. }) => "oversize_message",
            StreamingError::Broker(BrokerError::Backpressure { .. }) => "BACKPRESSURE",
            StreamingError::Allocation(e) => e.code(),
            StreamingError::InsufficientScope(_) => "insufficient_scope",
        }
    }
}

type ClusterKey = (String, String);
type ConsumerKey = (String, String, String, String);

#[derive(Debug)]
pub struct StreamingService {
    clock: Arc<dyn Clock>,
    policy: Arc<PolicyEngine>,
    provisioner: Arc<dyn BrokerProvisioner>,
    max_lease: Duration,
    clusters: RwLock<BTreeMap<ClusterKey, Arc<Mutex<StreamingCluster>>>>,
    /// Long-lived consumers behind the HTTP long-poll surface, keyed by
    /// (project, cluster, channel, group).
    remote_consumers: Mutex<HashMap<ConsumerKey, Arc<Subscription>>>,
}

/// Group used by HTTP consumers that do not name one.
pub const DEFAULT_REMOTE_GROUP: &str = "_default";

impl StreamingService {
    pub fn new(clock: Arc<dyn Clock>, policy: Arc<PolicyEngine>, provisioner: Arc<dyn BrokerProvisioner>) -> Self {
        StreamingService {
            clock,
            policy,
            provisioner,
            max_lease: DEFAULT_MAX_LEASE,
            clusters: RwLock::default(),
            remote_consumers: Mutex::default(),
        }
    }

    pub fn with_max_lease(mut self, lease: Duration) -> Self {
        self.max_lease = lease;
        self
    }

    pub fn max_lease(&self) -> Duration {
        self.max_lease
    }

    pub fn provisioner(&self) -> &Arc<dyn BrokerProvisioner> {
        &self.provisioner
    }

    /// Allocation charged when a cluster starts: node_count × max lease.
    pub fn cost(&self, req: &ClusterRequest) -> Units {
        Units::for_nodes(u64::from(req.node_count), self.max_lease)
    }

    pub fn start_cluster(&self, ctx: &AuthContext, req: ClusterRequest) -> Result<StreamingCluster, StreamingError> {
        if !ctx.has_scope(Scope::StreamingManage) {
            return Err(StreamingError::InsufficientScope(Scope::StreamingManage));
        }
        if !valid_cluster_name(&req.cluster_name) {
            return Err(StreamingError::InvalidName(req.cluster_name));
        }
        if req.node_count == 0 {
            return Err(StreamingError::InvalidSize("node_count must be at least 1"));
        }
        if req.cpu_count == 0 {
            return Err(StreamingError::InvalidSize("cpu_count must be at least 1"));
        }
        if !(req.ram_gib.is_finite() && req.ram_gib > 0.0) {
            return Err(StreamingError::InvalidSize("ram_gib must be positive"));
        }
        let project = ctx.project_id().to_string();
        let key = (project.clone(), req.cluster_name.clone());
        let now = self.clock.now();
        let cost = self.cost(&req);

        let slot = {
            let mut clusters = self.clusters.write();
            if clusters.contains_key(&key) {
                return Err(StreamingError::Duplicate(req.cluster_name));
            }
            self.policy.consume(&project, STREAMING_RESOURCE, cost)?;
            let record = StreamingCluster {
                cluster_name: req.cluster_name.clone(),
                project_id: project.clone(),
                request: req.clone(),
                state: ClusterState::Provisioning,
                endpoint: None,
                created_at: now,
                stopped_at: None,
                lease_expires_at: now.saturating_add(self.max_lease),
                detail: "provisioning".into(),
                charged_units: cost,
                refunded_units: Units::ZERO,
                history: vec![ClusterState::Provisioning],
            };
            let slot = Arc::new(Mutex::new(record));
            clusters.insert(key, slot.clone());
            slot
        };

        let mut rec = slot.lock();
        let deployment = DeploymentSpec {
            project_id: project.clone(),
            cluster_name: req.cluster_name.clone(),
            flavor: req.service_name,
            node_count: req.node_count,
        };
        match self.provisioner.deploy(&deployment) {
            Ok(endpoint) => {
                rec.transition(ClusterState::Running);
                rec.endpoint = Some(endpoint);
                rec.detail = "running".into();
            }
            Err(e) => {
                rec.transition(ClusterState::Failed);
                rec.detail = e.to_string();
                rec.stopped_at = Some(now);
                self.policy.release(&project, STREAMING_RESOURCE, cost)?;
                rec.refunded_units = cost;
                log::warn!("cluster {project}/{} failed: {e}", req.cluster_name);
            }
        }
        Ok(rec.clone())
    }

    fn slot(&self, project: &str, name: &str) -> Result<Arc<Mutex<StreamingCluster>>, StreamingError> {
        self.clusters
            .read()
            .get(&(project.to_string(), name.to_string()))
            .cloned()
            .ok_or_else(|| StreamingError::NotFound(name.to_string()))
    }

    pub fn get_cluster(&self, ctx: &AuthContext, name: &str) -> Result<StreamingCluster, StreamingError> {
        if !ctx.has_scope(Scope::StreamingRead) {
            return Err(StreamingError::InsufficientScope(Scope::StreamingRead));
        }
        Ok(self.slot(ctx.project_id(), name)?.lock().clone())
    }

    /// Clusters of the caller's project in every state, ordered by name.
    pub fn list_clusters(&self, ctx: &AuthContext) -> Result<Vec<StreamingCluster>, StreamingError> {
        if !ctx.has_scope(Scope::StreamingRead) {
            return Err(StreamingError::InsufficientScope(Scope::StreamingRead));
        }
        let slots: Vec<_> = self
            .clusters
            .read()
            .iter()
            .filter(|((p, _), _)| p == ctx.project_id())
            .map(|(_, s)| s.clone())
            .collect();
        Ok(slots.into_iter().map(|s| s.lock().clone()).collect())
    }

    /// Every cluster across all projects.
    pub fn all_clusters(&self) -> Vec<StreamingCluster> {
        let slots: Vec<_> = self.clusters.read().values().cloned().collect();
        slots.into_iter().map(|s| s.lock().clone()).collect()
    }

    pub fn stop_cluster(&self, ctx: &AuthContext, name: &str) -> Result<StreamingCluster, StreamingError> {
        if !ctx.has_scope(Scope::StreamingManage) {
            return Err(StreamingError::InsufficientScope(Scope::StreamingManage));
        }
        let slot = self.slot(ctx.project_id(), name)?;
        self.stop_slot(&slot, self.clock.now(), "stopped by user")
    }

    pub(crate) fn stop_in_project(
        &self,
        project_id: &str,
        name: &str,
        detail: &str,
    ) -> Result<StreamingCluster, StreamingError> {
        let slot = self.slot(project_id, name)?;
        self.stop_slot(&slot, self.clock.now(), detail)
    }

    fn stop_slot(
        &self,
        slot: &Mutex<StreamingCluster>,
        now: Timestamp,
        detail: &str,
    ) -> Result<StreamingCluster, StreamingError> {
        let mut rec = slot.lock();
        if rec.state != ClusterState::Running {
            return Err(StreamingError::Conflict {
                name: rec.cluster_name.clone(),
                state: rec.state,
            });
        }
        rec.transition(ClusterState::Stopping);
        let endpoint = rec.endpoint.take().expect("running cluster has an endpoint");
        self.remote_consumers
            .lock()
            .retain(|(p, c, _, _), _| !(p == &rec.project_id && c == &rec.cluster_name));
        self.provisioner.teardown(&endpoint);

        let unused = rec.lease_expires_at.saturating_since(now);
        let refund = Units::for_nodes(u64::from(rec.request.node_count), unused);
        self.policy.release(&rec.project_id, STREAMING_RESOURCE, refund)?;
        rec.refunded_units = refund;
        rec.transition(ClusterState::Stopped);
        rec.stopped_at = Some(now);
        rec.detail = detail.to_string();
        Ok(rec.clone())
    }

    /// Stops every RUNNING cluster whose lease has run out.
    pub fn expire_leases(&self, now: Timestamp) -> Vec<StreamingCluster> {
        let slots: Vec<_> = self.clusters.read().values().cloned().collect();
        slots
            .iter()
            .filter(|s| {
                let r = s.lock();
                r.state == ClusterState::Running && now >= r.lease_expires_at
            })
            .filter_map(|s| self.stop_slot(s, now, "lease expired").ok())
            .collect()
    }

    fn broker(&self, endpoint: &str) -> Result<Arc<Broker>, StreamingError> {
        if let Some(b) = self.provisioner.resolve(endpoint) {
            return Ok(b);
        }
        let known = parse_endpoint(endpoint)
            .is_some_and(|(p, c)| self.clusters.read().contains_key(&(p.to_string(), c.to_string())));
        if known {
            Err(BrokerError::ClusterStopped.into())
        } else {
            Err(StreamingError::UnknownEndpoint(endpoint.to_string()))
        }
    }

    pub fn publish(&self, endpoint: &str, channel: &str, payload: &[u8]) -> Result<u64, StreamingError> {
        Ok(self.broker(endpoint)?.publish(channel, payload)?)
    }

    pub fn subscribe(
        &self,
        endpoint: &str,
        channel: &str,
        group: Option<&str>,
    ) -> Result<Subscription, StreamingError> {
        Ok(self.broker(endpoint)?.subscribe(channel, group)?)
    }

    fn own_endpoint(&self, ctx: &AuthContext, name: &str) -> Result<String, StreamingError> {
        let slot = self.slot(ctx.project_id(), name)?;
        let rec = slot.lock();
        rec.endpoint
            .clone()
            .ok_or(StreamingError::Broker(BrokerError::ClusterStopped))
    }

    /// Publish addressed by cluster name within the caller's project.
    pub fn publish_to(
        &self,
        ctx: &AuthContext,
        name: &str,
        channel: &str,
        payload: &[u8],
    ) -> Result<u64, StreamingError> {
        if !ctx.has_scope(Scope::StreamingManage) {
            return Err(StreamingError::InsufficientScope(Scope::StreamingManage));
        }
        let endpoint = self.own_endpoint(ctx, name)?;
        self.publish(&endpoint, channel, payload)
    }

    /// Long-poll receive for remote consumers. Consumers are identified by
    /// group (default [`DEFAULT_REMOTE_GROUP`]) and persist until the cluster stops.
    pub fn receive_from(
        &self,
        ctx: &AuthContext,
        name: &str,
        channel: &str,
        group: Option<&str>,
        max: usize,
        wait: Duration,
    ) -> Result<Vec<Message>, StreamingError> {
        if !ctx.has_scope(Scope::StreamingRead) {
            return Err(StreamingError::InsufficientScope(Scope::StreamingRead));
        }
        let endpoint = self.own_endpoint(ctx, name)?;
        let group = group.unwrap_or(DEFAULT_REMOTE_GROUP).to_string();
        let key = (
            ctx.project_id().to_string(),
            name.to_string(),
            channel.to_string(),
            group,
        );
        let sub = {
            let mut consumers = self.remote_consumers.lock();
            match consumers.get(&key) {
                Some(s) => s.clone(),
                None => {
                    let s = Arc::new(self.subscribe(&endpoint, channel, Some(&key.3))?);
                    consumers.insert(key, s.clone());
                    s
                }
            }
        };
        Ok(sub.recv_batch(max, wait)?)
    }
}
