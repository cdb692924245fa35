//! Simulated batch scheduler behind the `/compute` endpoints.
//!
//! Each compute resource is a fixed pool of nodes with a strict FIFO queue and
//! no backfill: if the head of the queue does not fit, nothing behind it
//! starts. Jobs "run" for `min(wall_limit, sim_seconds)` of clock time; the
//! sentinel command `fail` ends in FAILED instead of COMPLETED.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::error::{Classify, ErrorKind};
use crate::facility::{Facility, ResourceState};
use crate::policy::{PolicyEngine, PolicyError, Units};
use crate::scope::Scope;
use crate::time::{duration_secs, Clock, Timestamp};
use crate::tokens::AuthContext;

/// Command that makes a simulated job fail.
pub const FAIL_COMMAND: &str = "fail";

/// Output parameter every job exposes.
pub const JOB_ID_PARAM: &str = "JOB_ID";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    /// Filled from the caller's token when omitted.
    #[serde(default)]
    pub project_id: String,
    pub resource_id: String,
    pub nodes: u32,
    #[serde(with = "duration_secs")]
    pub wall_limit: Duration,
    #[serde(default)]
    pub command: String,
    #[serde(default)]
    pub output_params: BTreeMap<String, String>,
    /// Simulated run time in seconds; the job runs for `min(wall_limit, sim_seconds)`.
    #[serde(default)]
    pub sim_seconds: u64,
}

impl JobSpec {
    pub fn new(resource_id: &str, nodes: u32, wall_limit: Duration) -> Self {
        JobSpec {
            project_id: String::new(),
            resource_id: resource_id.to_string(),
            nodes,
            wall_limit,
            command: String::new(),
            output_params: BTreeMap::new(),
            sim_seconds: 0,
        }
    }

    pub fn with_command(mut self, command: &str) -> Self {
        self.command = command.to_string();
        self
    }

    pub fn with_sim_seconds(mut self, secs: u64) -> Self {
        self.sim_seconds = secs;
        self
    }

    /// Allocation charged at submission: nodes × wall-limit.
    pub fn cost(&self) -> Units {
        Units::for_nodes(u64::from(self.nodes), self.wall_limit)
    }

    pub fn run_duration(&self) -> Duration {
        self.wall_limit.min(Duration::from_secs(self.sim_seconds))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum JobState {
    Pending,
    Running,
    Completed,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Completed | JobState::Failed | JobState::Cancelled)
    }

    pub fn can_transition_to(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Pending, Running) | (Pending, Cancelled) | (Running, Completed) | (Running, Failed) | (Running, Cancelled)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct JobRecord {
    pub job_id: String,
    pub spec: JobSpec,
    pub state: JobState,
    pub submitted_at: Timestamp,
    pub started_at: Option<Timestamp>,
    pub finished_at: Option<Timestamp>,
    pub exit_detail: String,
    pub charged_units: Units,
    pub refunded_units: Units,
}

impl JobRecord {
    /// Declared output params plus the implicit `JOB_ID`.
    pub fn outputs(&self) -> BTreeMap<String, String> {
        let mut out = self.spec.output_params.clone();
        out.insert(JOB_ID_PARAM.to_string(), self.job_id.clone());
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Transition {
    pub job_id: String,
    pub from: JobState,
    pub to: JobState,
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ComputeError {
    #[error("unknown compute resource {0:?}")]
    UnknownResource(String),
    #[error("job requests {requested} nodes, exceeds cluster size {total}")]
    ExceedsClusterSize { requested: u32, total: u32 },
    #[error("nodes must be at least 1")]
    ZeroNodes,
    #[error("wall_limit must be positive")]
    ZeroWallLimit,
    #[error("resource {0:?} is in maintenance")]
    InMaintenance(String),
    #[error("job project {job:?} does not match token project {token:?}")]
    ProjectMismatch { job: String, token: String },
    #[error("job {0} not found")]
    NotFound(String),
    #[error("job {job_id} is already {state:?}")]
    AlreadyTerminal { job_id: String, state: JobState },
    #[error(transparent)]
    Allocation(#[from] PolicyError),
    #[error("missing required scope {0}")]
    InsufficientScope(Scope),
}

impl Classify for ComputeError {
    fn kind(&self) -> ErrorKind {
        match self {
            ComputeError::UnknownResource(_) | ComputeError::NotFound(_) => ErrorKind::NotFound,
            ComputeError::ExceedsClusterSize { .. } | ComputeError::ZeroNodes | ComputeError::ZeroWallLimit => {
                ErrorKind::BadRequest
            }
            ComputeError::InMaintenance(_) => ErrorKind::Unavailable,
            ComputeError::ProjectMismatch { .. } => ErrorKind::PolicyDenied,
            ComputeError::AlreadyTerminal { .. } => ErrorKind::Conflict,
            ComputeError::Allocation(e) => e.kind(),
            ComputeError::InsufficientScope(_) => ErrorKind::Forbidden,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ComputeError::UnknownResource(_) => "unknown_resource",
            ComputeError::ExceedsClusterSize { .. } => "exceeds_cluster_size",
            ComputeError::ZeroNodes => "invalid_nodes",
            ComputeError::ZeroWallLimit => "invalid_wall_limit",
            ComputeError::InMaintenance(_) => "resource_in_maintenance",
            ComputeError::ProjectMismatch { .. } => "project_mismatch",
            ComputeError::NotFound(_) => "not_found",
            ComputeError::AlreadyTerminal { .. } => "conflict",
            ComputeError::Allocation(e) => e.code(),
            ComputeError::InsufficientScope(_) => "insufficient_scope",
        }
    }
}

/// Capacity model and queue of one resource.
#[derive(Debug)]
struct ClusterModel {
    total_nodes: u32,
    pending: VecDeque<String>,
    /// Jobs holding nodes, in start order. Cancelled jobs stay here until the
    /// next step frees their nodes.
    running: Vec<(String, u32)>,
    jobs: HashMap<String, JobRecord>,
}

impl ClusterModel {
    fn used_nodes(&self) -> u32 {
        self.running.iter().map(|(_, n)| n).sum()
    }
}

#[derive(Debug)]
pub struct ComputeService {
    clock: Arc<dyn Clock>,
    policy: Arc<PolicyEngine>,
    facility: Arc<Facility>,
    next_id: AtomicU64,
    clusters: BTreeMap<String, Mutex<ClusterModel>>,
    index: RwLock<HashMap<String, String>>,
}

impl ComputeService {
    pub fn new(clock: Arc<dyn Clock>, policy: Arc<PolicyEngine>, facility: Arc<Facility>) -> Self {
        let clusters = facility
            .compute_resources()
            .into_iter()
            .map(|(id, nodes)| {
                (
                    id,
                    Mutex::new(ClusterModel {
                        total_nodes: nodes,
                        pending: VecDeque::new(),
                        running: Vec::new(),
                        jobs: HashMap::new(),
                    }),
                )
            })
            .collect();
        ComputeService {
            clock,
            policy,
            facility,
            next_id: AtomicU64::new(1),
            clusters,
            index: RwLock::default(),
        }
    }

    pub fn resources(&self) -> impl Iterator<Item = &str> {
        self.clusters.keys().map(String::as_str)
    }

    pub fn total_nodes(&self, resource_id: &str) -> Option<u32> {
        self.clusters.get(resource_id).map(|c| c.lock().total_nodes)
    }

    /// Nodes currently held, including cancelled jobs not yet reaped.
    pub fn used_nodes(&self, resource_id: &str) -> Option<u32> {
        self.clusters.get(resource_id).map(|c| c.lock().used_nodes())
    }

    pub fn submit_job(&self, ctx: &AuthContext, mut spec: JobSpec) -> Result<JobRecord, ComputeError> {
        if !ctx.has_scope(Scope::ComputeSubmit) {
            return Err(ComputeError::InsufficientScope(Scope::ComputeSubmit));
        }
        if spec.project_id.is_empty() {
            spec.project_id = ctx.project_id().to_string();
        } else if spec.project_id != ctx.project_id() {
            return Err(ComputeError::ProjectMismatch {
                job: spec.project_id,
                token: ctx.project_id().to_string(),
            });
        }
        if spec.nodes == 0 {
            return Err(ComputeError::ZeroNodes);
        }
        if spec.wall_limit.is_zero() {
            return Err(ComputeError::ZeroWallLimit);
        }
        let cluster = self
            .clusters
            .get(&spec.resource_id)
            .ok_or_else(|| ComputeError::UnknownResource(spec.resource_id.clone()))?;
        let now = self.clock.now();
        if self.facility.resource_state(&spec.resource_id, now) == Some(ResourceState::Maintenance) {
            return Err(ComputeError::InMaintenance(spec.resource_id.clone()));
        }

        let mut model = cluster.lock();
        if spec.nodes > model.total_nodes {
            return Err(ComputeError::ExceedsClusterSize {
                requested: spec.nodes,
                total: model.total_nodes,
            });
        }
        let cost = spec.cost();
        self.policy.consume(&spec.project_id, &spec.resource_id, cost)?;

        let job_id = format!("{:07}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let record = JobRecord {
            job_id: job_id.clone(),
            spec,
            state: JobState::Pending,
            submitted_at: now,
            started_at: None,
            finished_at: None,
            exit_detail: String::new(),
            charged_units: cost,
            refunded_units: Units::ZERO,
        };
        model.pending.push_back(job_id.clone());
        model.jobs.insert(job_id.clone(), record.clone());
        self.index
            .write()
            .insert(job_id.clone(), record.spec.resource_id.clone());
        log::debug!("job {job_id} queued on {}", record.spec.resource_id);
        Ok(record)
    }

    /// Advances one resource's scheduler to `now`: completes finished jobs,
    /// then starts queued jobs in submission order while the head fits.
    pub fn scheduler_step(&self, resource_id: &str, now: Timestamp) -> Vec<Transition> {
        let Some(cluster) = self.clusters.get(resource_id) else {
            return Vec::new();
        };
        let mut model = cluster.lock();
        let model = &mut *model;
        let mut transitions = Vec::new();

        let mut still_running = Vec::with_capacity(model.running.len());
        for (job_id, nodes) in std::mem::take(&mut model.running) {
            let job = model.jobs.get_mut(&job_id).expect("running job has a record");
            if job.state != JobState::Running {
                // cancelled since the last step; nodes are released now
                continue;
            }
            let started = job.started_at.expect("running job has started_at");
            if started.saturating_add(job.spec.run_duration()) <= now {
                let to = if job.spec.command == FAIL_COMMAND {
                    job.exit_detail = "command failed".into();
                    JobState::Failed
                } else {
                    job.exit_detail = "completed".into();
                    JobState::Completed
                };
                job.state = to;
                job.finished_at = Some(now);
                transitions.push(Transition {
                    job_id,
                    from: JobState::Running,
                    to,
                    at: now,
                });
            } else {
                still_running.push((job_id, nodes));
            }
        }
        model.running = still_running;

        let mut free = model.total_nodes - model.running.iter().map(|(_, n)| n).sum::<u32>();
        while let Some(head) = model.pending.front() {
            let job = model.jobs.get_mut(head).expect("queued job has a record");
            if job.spec.nodes > free {
                break;
            }
            free -= job.spec.nodes;
            job.state = JobState::Running;
            job.started_at = Some(now);
            let id = model.pending.pop_front().expect("front exists");
            model.running.push((id.clone(), job.spec.nodes));
            transitions.push(Transition {
                job_id: id,
                from: JobState::Pending,
                to: JobState::Running,
                at: now,
            });
        }
        transitions
    }

    /// Steps every resource at the clock's current time.
    pub fn step_all(&self) -> Vec<Transition> {
        let now = self.clock.now();
        self.clusters.keys().flat_map(|r| self.scheduler_step(r, now)).collect()
    }

    fn with_job<T>(
        &self,
        project_id: &str,
        job_id: &str,
        f: impl FnOnce(&mut ClusterModel) -> Result<T, ComputeError>,
    ) -> Result<T, ComputeError> {
        let not_found = || ComputeError::NotFound(job_id.to_string());
        let resource = self.index.read().get(job_id).cloned().ok_or_else(not_found)?;
        let mut model = self.clusters[&resource].lock();
        let job = model.jobs.get(job_id).ok_or_else(not_found)?;
        if job.spec.project_id != project_id {
            return Err(not_found());
        }
        f(&mut model)
    }

    pub fn get_job(&self, ctx: &AuthContext, job_id: &str) -> Result<JobRecord, ComputeError> {
        if !ctx.has_scope(Scope::ComputeRead) {
            return Err(ComputeError::InsufficientScope(Scope::ComputeRead));
        }
        self.job_in_project(ctx.project_id(), job_id)
    }

    pub(crate) fn job_in_project(&self, project_id: &str, job_id: &str) -> Result<JobRecord, ComputeError> {
        self.with_job(project_id, job_id, |m| Ok(m.jobs[job_id].clone()))
    }

    /// Jobs of the caller's project in submission order.
    pub fn list_jobs(&self, ctx: &AuthContext) -> Result<Vec<JobRecord>, ComputeError> {
        if !ctx.has_scope(Scope::ComputeRead) {
            return Err(ComputeError::InsufficientScope(Scope::ComputeRead));
        }
        let mut out: Vec<JobRecord> = self
            .clusters
            .values()
            .flat_map(|c| {
                c.lock()
                    .jobs
                    .values()
                    .filter(|j| j.spec.project_id == ctx.project_id())
                    .cloned()
                    .collect::<Vec<_>>()
            })
            .collect();
        out.sort_by(|a, b| a.job_id.cmp(&b.job_id));
        Ok(out)
    }

    pub fn cancel_job(&self, ctx: &AuthContext, job_id: &str) -> Result<JobRecord, ComputeError> {
        if !ctx.has_scope(Scope::ComputeCancel) {
            return Err(ComputeError::InsufficientScope(Scope::ComputeCancel));
        }
        self.cancel_in_project(ctx.project_id(), job_id)
    }

    pub(crate) fn cancel_in_project(&self, project_id: &str, job_id: &str) -> Result<JobRecord, ComputeError> {
        let now = self.clock.now();
        self.with_job(project_id, job_id, |model| {
            let job = model.jobs.get_mut(job_id).expect("checked by with_job");
            let refund = match job.state {
                JobState::Pending => job.charged_units,
                JobState::Running => {
                    let elapsed = now.saturating_since(job.started_at.expect("running has started_at"));
                    let unused = job.spec.wall_limit.saturating_sub(elapsed);
                    Units::for_nodes(u64::from(job.spec.nodes), unused)
                }
                state => {
                    return Err(ComputeError::AlreadyTerminal {
                        job_id: job_id.to_string(),
                        state,
                    })
                }
            };
            let was_pending = job.state == JobState::Pending;
            self.policy
                .release(&job.spec.project_id, &job.spec.resource_id, refund)?;
            job.state = JobState::Cancelled;
            job.finished_at = Some(now);
            job.exit_detail = "cancelled".into();
            job.refunded_units = refund;
            let record = job.clone();
            if was_pending {
                model.pending.retain(|id| id != job_id);
            }
            Ok(record)
        })
    }
}
