//! Wiring: builds every service from configuration, mints the bootstrap
//! admin credential, and drives periodic housekeeping.

use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Serialize;

use crate::compute::{ComputeService, Transition};
use crate::facility::{Facility, FacilityDocument, FacilityError};
use crate::gateway::{AuditLog, Gateway};
use crate::policy::{PolicyDocument, PolicyEngine, PolicyError, ProjectSpec};
use crate::scope::ScopeSet;
use crate::streaming::{BrokerConfig, EmbeddedProvisioner, StreamingService, DEFAULT_MAX_LEASE};
use crate::time::Clock;
use crate::tokens::{AccessToken, SigningKey, TokenError, TokenService, DEFAULT_TTL};
use crate::workflows::{EngineConfig, WorkflowEngine};

pub const DEFAULT_ADMIN_USER: &str = "admin";
pub const DEFAULT_ADMIN_PROJECT: &str = "admin";
pub const DEFAULT_STREAMING_NODES: u32 = 16;
pub const DEFAULT_TICK: Duration = Duration::from_millis(500);

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
    #[error("facility: {0}")]
    Facility(#[from] FacilityError),
    #[error("bootstrap token: {0}")]
    Token(#[from] TokenError),
}

#[derive(Clone, Debug)]
pub struct MeshConfig {
    pub policy: PolicyDocument,
    pub facility: FacilityDocument,
    /// Generated at startup when absent.
    pub signing_key: Option<SigningKey>,
    pub token_ttl: Duration,
    pub streaming_nodes: u32,
    pub broker: BrokerConfig,
    pub max_lease: Duration,
    pub engine: EngineConfig,
    pub admin_user: String,
    pub admin_project: String,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig {
            policy: PolicyDocument::default(),
            facility: FacilityDocument::default(),
            signing_key: None,
            token_ttl: DEFAULT_TTL,
            streaming_nodes: DEFAULT_STREAMING_NODES,
            broker: BrokerConfig::default(),
            max_lease: DEFAULT_MAX_LEASE,
            engine: EngineConfig::default(),
            admin_user: DEFAULT_ADMIN_USER.to_string(),
            admin_project: DEFAULT_ADMIN_PROJECT.to_string(),
        }
    }
}

/// Every service, shared by the gateway and the housekeeping ticker.
#[derive(Debug)]
pub struct Services {
    pub clock: Arc<dyn Clock>,
    pub policy: Arc<PolicyEngine>,
    pub tokens: Arc<TokenService>,
    pub facility: Arc<Facility>,
    pub compute: Arc<ComputeService>,
    pub streaming: Arc<StreamingService>,
    pub workflows: Arc<WorkflowEngine>,
    pub audit: Arc<AuditLog>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TickReport {
    pub transitions: Vec<Transition>,
    pub expired_clusters: Vec<String>,
    pub purged_revocations: usize,
}

impl Services {
    /// One housekeeping pass: scheduler step on every compute resource,
    /// lease expiry, and revocation-list purge.
    pub fn tick(&self) -> TickReport {
        let now = self.clock.now();
        TickReport {
            transitions: self.compute.step_all(),
            expired_clusters: self
                .streaming
                .expire_leases(now)
                .into_iter()
                .map(|c| format!("{}/{}", c.project_id, c.cluster_name))
                .collect(),
            purged_revocations: self.tokens.purge_expired(now),
        }
    }
}

#[derive(Debug)]
pub struct Mesh {
    services: Arc<Services>,
    gateway: Arc<Gateway>,
    admin_token: AccessToken,
}

impl Mesh {
    pub fn new(config: MeshConfig, clock: Arc<dyn Clock>) -> Result<Mesh, MeshError> {
        Mesh::with_audit(config, clock, AuditLog::default())
    }

    pub fn with_audit_sink(
        config: MeshConfig,
        clock: Arc<dyn Clock>,
        sink: Box<dyn Write + Send>,
    ) -> Result<Mesh, MeshError> {
        Mesh::with_audit(config, clock, AuditLog::with_sink(sink))
    }

    fn with_audit(mut config: MeshConfig, clock: Arc<dyn Clock>, audit: AuditLog) -> Result<Mesh, MeshError> {
        if !config
            .policy
            .projects
            .iter()
            .any(|p| p.project_id == config.admin_project)
        {
            config.policy.projects.push(ProjectSpec::new(
                &config.admin_project,
                [config.admin_user.as_str()],
                [],
                [],
            ));
        }
        let policy = Arc::new(PolicyEngine::new());
        policy.load(&config.policy)?;
        let facility = Arc::new(Facility::new(&config.facility, Arc::clone(&clock))?);
        let tokens = Arc::new(
            TokenService::new(
                config.signing_key.unwrap_or_else(SigningKey::generate),
                Arc::clone(&clock),
                Arc::clone(&policy),
            )
            .with_default_ttl(config.token_ttl),
        );
        let compute = Arc::new(ComputeService::new(
            Arc::clone(&clock),
            Arc::clone(&policy),
            Arc::clone(&facility),
        ));
        let provisioner = Arc::new(EmbeddedProvisioner::new(config.streaming_nodes, config.broker));
        let streaming = Arc::new(
            StreamingService::new(Arc::clone(&clock), Arc::clone(&policy), provisioner)
                .with_max_lease(config.max_lease),
        );
        let workflows = Arc::new(WorkflowEngine::new(
            Arc::clone(&clock),
            Arc::clone(&policy),
            Arc::clone(&compute),
            Arc::clone(&streaming),
            Arc::clone(&facility),
            config.engine,
        ));
        let admin_token = tokens.issue_unchecked(&config.admin_user, &config.admin_project, ScopeSet::all(), None)?;
        let services = Arc::new(Services {
            clock,
            policy,
            tokens,
            facility,
            compute,
            streaming,
            workflows,
            audit: Arc::new(audit),
        });
        Ok(Mesh {
            gateway: Arc::new(Gateway::new(Arc::clone(&services))),
            services,
            admin_token,
        })
    }

    pub fn services(&self) -> &Arc<Services> {
        &self.services
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    /// Credential for the bootstrap admin: every scope, in the admin project.
    pub fn admin_token(&self) -> &AccessToken {
        &self.admin_token
    }

    pub fn tick(&self) -> TickReport {
        self.services.tick()
    }

    /// Runs [`Services::tick`] every `every` on a background thread until
    /// the returned handle is dropped.
    pub fn start_ticker(&self, every: Duration) -> Ticker {
        let stop = Arc::new(AtomicBool::new(false));
        let services = Arc::clone(&self.services);
        let flag = Arc::clone(&stop);
        let thread = std::thread::Builder::new()
            .name("s3m-ticker".into())
            .spawn(move || {
                while !flag.load(Ordering::Relaxed) {
                    let report = services.tick();
                    if !report.transitions.is_empty() || !report.expired_clusters.is_empty() {
                        log::debug!(
                            "tick: {} job transitions, {} expired clusters",
                            report.transitions.len(),
                            report.expired_clusters.len()
                        );
                    }
                    std::thread::park_timeout(every);
                }
            })
            .expect("spawn ticker");
        Ticker {
            stop,
            thread: Some(thread),
        }
    }
}

#[derive(Debug)]
pub struct Ticker {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Drop for Ticker {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            t.thread().unpark();
            let _ = t.join();
        }
    }
}
