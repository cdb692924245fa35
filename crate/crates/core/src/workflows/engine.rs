use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::document::WorkflowSpec;
use super::interpolate::{interpolate, TaskOutputs};
use super::template::{TemplateKind, TemplateRegistry, WorkflowTemplate};
use super::validate::validate_dag;
use super::WorkflowError;
use crate::compute::{ComputeService, JobSpec, JobState, JOB_ID_PARAM};
use crate::facility::Facility;
use crate::policy::PolicyEngine;
use crate::scope::Scope;
use crate::streaming::{valid_cluster_name, ClusterRequest, ClusterState, StreamingService, STREAMING_RESOURCE};
use crate::time::{Clock, Timestamp};
use crate::tokens::AuthContext;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum WorkflowState {
    Pending,
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

impl WorkflowState {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            WorkflowState::Succeeded | WorkflowState::Failed | WorkflowState::Cancelled
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskState {
    Waiting,
    Ready,
    Running,
    Succeeded,
    Failed,
    Skipped,
}

impl TaskState {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Succeeded | TaskState::Failed | TaskState::Skipped)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TaskDetail {
    pub template: String,
    pub attempts: u32,
    pub started_at: Option<Timestamp>,
    pub finished_at: Option<Timestamp>,
    /// Engine-wide logical clock values; a task's `start_seq` is greater
    /// than the `finish_seq` of each of its dependencies.
    pub start_seq: Option<u64>,
    pub finish_seq: Option<u64>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WorkflowRun {
    pub workflow_id: String,
    pub name: String,
    pub project_id: String,
    pub user_id: String,
    pub state: WorkflowState,
    pub submitted_at: Timestamp,
    pub finished_at: Option<Timestamp>,
    pub detail: String,
    pub task_states: BTreeMap<String, TaskState>,
    pub task_outputs: TaskOutputs,
    pub tasks: BTreeMap<String, TaskDetail>,
    /// Jobs submitted and clusters started by this run.
    pub jobs: Vec<String>,
    pub clusters: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    /// Retries after the first attempt when a task sets no `retryLimit`.
    pub default_retry_limit: u32,
    /// Real-time sleep between job status polls.
    pub poll_interval: Duration,
    /// Simulated-time budget for a job to reach a terminal state.
    pub job_timeout: Duration,
    /// Real-time cap on any single wait, so a stalled scheduler cannot pin a worker.
    pub max_real_wait: Duration,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            default_retry_limit: 1,
            poll_interval: Duration::from_millis(20),
            job_timeout: Duration::from_secs(600),
            max_real_wait: Duration::from_secs(600),
        }
    }
}

enum Event {
    Done {
        task: String,
        result: Result<BTreeMap<String, String>, String>,
    },
    Wake,
}

struct RunHandle {
    ctx: AuthContext,
    spec: WorkflowSpec,
    templates: BTreeMap<String, WorkflowTemplate>,
    run: Mutex<WorkflowRun>,
    settled: Condvar,
    events: Mutex<Option<Sender<Event>>>,
}

impl RunHandle {
    fn is_cancelled(&self) -> bool {
        self.run.lock().state == WorkflowState::Cancelled
    }

    /// Records a created job; false if the run was cancelled meanwhile.
    fn register_job(&self, job_id: &str) -> bool {
        let mut run = self.run.lock();
        run.jobs.push(job_id.to_string());
        run.state != WorkflowState::Cancelled
    }

    fn register_cluster(&self, name: &str) -> bool {
        let mut run = self.run.lock();
        run.clusters.push(name.to_string());
        run.state != WorkflowState::Cancelled
    }

    fn wake(&self) {
        if let Some(tx) = self.events.lock().as_ref() {
            let _ = tx.send(Event::Wake);
        }
    }
}

struct Inner {
    clock: Arc<dyn Clock>,
    policy: Arc<PolicyEngine>,
    compute: Arc<ComputeService>,
    streaming: Arc<StreamingService>,
    facility: Arc<Facility>,
    config: EngineConfig,
    templates: TemplateRegistry,
    runs: RwLock<HashMap<String, Arc<RunHandle>>>,
    next_id: AtomicU64,
    seq: AtomicU64,
}

pub struct WorkflowEngine {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for WorkflowEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkflowEngine")
            .field("runs", &self.inner.runs.read().len())
            .finish_non_exhaustive()
    }
}

impl WorkflowEngine {
    pub fn new(
        clock: Arc<dyn Clock>,
        policy: Arc<PolicyEngine>,
        compute: Arc<ComputeService>,
        streaming: Arc<StreamingService>,
        facility: Arc<Facility>,
        config: EngineConfig,
    ) -> Self {
        WorkflowEngine {
            inner: Arc::new(Inner {
                clock,
                policy,
                compute,
                streaming,
                facility,
                config,
                templates: TemplateRegistry::default(),
                runs: RwLock::new(HashMap::new()),
                next_id: AtomicU64::new(1),
                seq: AtomicU64::new(1),
            }),
        }
    }

    pub fn register_template(&self, ctx: &AuthContext, template: WorkflowTemplate) -> Result<(), WorkflowError> {
        require(ctx, Scope::WorkflowsManage)?;
        self.inner.templates.insert(template)
    }

    pub fn list_templates(&self, ctx: &AuthContext) -> Result<Vec<WorkflowTemplate>, WorkflowError> {
        require(ctx, Scope::WorkflowsRead)?;
        Ok(self.inner.templates.list())
    }

    pub fn validate(&self, spec: &WorkflowSpec) -> Vec<super::ValidationError> {
        validate_dag(spec, &self.inner.templates.snapshot())
    }

    /// Validates and starts a workflow. An invalid DAG is rejected whole and
    /// nothing is recorded.
    pub fn submit_workflow(&self, ctx: &AuthContext, spec: WorkflowSpec) -> Result<WorkflowRun, WorkflowError> {
        require(ctx, Scope::WorkflowsManage)?;
        let templates = self.inner.templates.snapshot();
        let errors = validate_dag(&spec, &templates);
        if !errors.is_empty() {
            return Err(WorkflowError::Invalid(errors));
        }
        let n = self.inner.next_id.fetch_add(1, Ordering::Relaxed);
        let workflow_id = format!("wf-{n:07}");
        let run = WorkflowRun {
            workflow_id: workflow_id.clone(),
            name: spec.name.clone(),
            project_id: ctx.project_id().to_string(),
            user_id: ctx.user_id().to_string(),
            state: WorkflowState::Pending,
            submitted_at: self.inner.clock.now(),
            finished_at: None,
            detail: String::new(),
            task_states: spec
                .tasks
                .iter()
                .map(|t| (t.name.clone(), TaskState::Waiting))
                .collect(),
            task_outputs: TaskOutputs::new(),
            tasks: spec
                .tasks
                .iter()
                .map(|t| {
                    (
                        t.name.clone(),
                        TaskDetail {
                            template: t.template_ref.clone(),
                            ..TaskDetail::default()
                        },
                    )
                })
                .collect(),
            jobs: Vec::new(),
            clusters: Vec::new(),
        };
        let snapshot = run.clone();
        let handle = Arc::new(RunHandle {
            ctx: ctx.clone(),
            spec,
            templates,
            run: Mutex::new(run),
            settled: Condvar::new(),
            events: Mutex::new(None),
        });
        self.inner.runs.write().insert(workflow_id.clone(), Arc::clone(&handle));
        let inner = Arc::clone(&self.inner);
        std::thread::Builder::new()
            .name(workflow_id)
            .spawn(move || execute_run(&inner, &handle))
            .expect("spawn workflow thread");
        Ok(snapshot)
    }

    fn handle(&self, ctx: &AuthContext, workflow_id: &str) -> Result<Arc<RunHandle>, WorkflowError> {
        self.inner
            .runs
            .read()
            .get(workflow_id)
            .filter(|h| h.ctx.project_id() == ctx.project_id())
            .cloned()
            .ok_or_else(|| WorkflowError::NotFound(workflow_id.to_string()))
    }

    pub fn get_workflow(&self, ctx: &AuthContext, workflow_id: &str) -> Result<WorkflowRun, WorkflowError> {
        require(ctx, Scope::WorkflowsRead)?;
        Ok(self.handle(ctx, workflow_id)?.run.lock().clone())
    }

    /// Runs of the caller's project ordered by id.
    pub fn list_workflows(&self, ctx: &AuthContext) -> Result<Vec<WorkflowRun>, WorkflowError> {
        require(ctx, Scope::WorkflowsRead)?;
        let mut runs: Vec<WorkflowRun> = self
            .inner
            .runs
            .read()
            .values()
            .filter(|h| h.ctx.project_id() == ctx.project_id())
            .map(|h| h.run.lock().clone())
            .collect();
        runs.sort_by(|a, b| a.workflow_id.cmp(&b.workflow_id));
        Ok(runs)
    }

    /// Marks the run CANCELLED, skips tasks not yet started, and cancels the
    /// jobs and stops the clusters it created.
    pub fn cancel_workflow(&self, ctx: &AuthContext, workflow_id: &str) -> Result<WorkflowRun, WorkflowError> {
        require(ctx, Scope::WorkflowsManage)?;
        let handle = self.handle(ctx, workflow_id)?;
        let (snapshot, jobs, clusters) = {
            let mut run = handle.run.lock();
            if run.state.is_terminal() {
                return Err(WorkflowError::AlreadyTerminal {
                    workflow_id: workflow_id.to_string(),
                    state: run.state,
                });
            }
            run.state = WorkflowState::Cancelled;
            run.finished_at = Some(self.inner.clock.now());
            run.detail = "cancelled".into();
            skip_unstarted(&mut run);
            (run.clone(), run.jobs.clone(), run.clusters.clone())
        };
        cleanup(&self.inner, &handle, &jobs, &clusters);
        handle.settled.notify_all();
        handle.wake();
        Ok(snapshot)
    }

    /// Blocks until the run reaches a terminal state or `timeout` passes.
    pub fn wait(&self, workflow_id: &str, timeout: Duration) -> Option<WorkflowRun> {
        let handle = self.inner.runs.read().get(workflow_id).cloned()?;
        let deadline = Instant::now() + timeout;
        let mut run = handle.run.lock();
        while !run.state.is_terminal() {
            if handle.settled.wait_until(&mut run, deadline).timed_out() {
                break;
            }
        }
        Some(run.clone())
    }
}

fn require(ctx: &AuthContext, scope: Scope) -> Result<(), WorkflowError> {
    if ctx.has_scope(scope) {
        Ok(())
    } else {
        Err(WorkflowError::InsufficientScope(scope))
    }
}

fn skip_unstarted(run: &mut WorkflowRun) {
    for state in run.task_states.values_mut() {
        if matches!(state, TaskState::Waiting | TaskState::Ready) {
            *state = TaskState::Skipped;
        }
    }
}

fn cleanup(inner: &Inner, handle: &RunHandle, jobs: &[String], clusters: &[String]) {
    let project = handle.ctx.project_id();
    for job in jobs {
        if let Err(e) = inner.compute.cancel_in_project(project, job) {
            log::debug!("workflow cleanup: job {job}: {e}");
        }
    }
    for cluster in clusters {
        if let Err(e) = inner.streaming.stop_in_project(project, cluster, "workflow cancelled") {
            log::debug!("workflow cleanup: cluster {cluster}: {e}");
        }
    }
}

/// Drives one run to a terminal state. Every task whose dependencies have
/// all succeeded is launched in the same pass, so independent branches
/// overlap.
fn execute_run(inner: &Arc<Inner>, handle: &Arc<RunHandle>) {
    let (tx, rx) = channel();
    *handle.events.lock() = Some(tx.clone());
    let deps: HashMap<&str, &[String]> = handle
        .spec
        .tasks
        .iter()
        .map(|t| (t.name.as_str(), t.dependencies.as_slice()))
        .collect();
    let mut in_flight = 0usize;
    let mut failed = false;
    {
        let mut run = handle.run.lock();
        if run.state == WorkflowState::Pending {
            run.state = WorkflowState::Running;
        }
    }

    loop {
        let mut launches = Vec::new();
        {
            let mut run = handle.run.lock();
            match run.state {
                WorkflowState::Cancelled => {
                    if in_flight == 0 {
                        break;
                    }
                }
                WorkflowState::Running if failed => {
                    if in_flight == 0 {
                        run.state = WorkflowState::Failed;
                        run.finished_at = Some(inner.clock.now());
                        break;
                    }
                }
                WorkflowState::Running => {
                    let ready: Vec<String> = handle
                        .spec
                        .tasks
                        .iter()
                        .filter(|t| run.task_states[&t.name] == TaskState::Waiting)
                        .filter(|t| {
                            deps[t.name.as_str()]
                                .iter()
                                .all(|d| run.task_states[d] == TaskState::Succeeded)
                        })
                        .map(|t| t.name.clone())
                        .collect();
                    for name in &ready {
                        run.task_states.insert(name.clone(), TaskState::Ready);
                    }
                    let now = inner.clock.now();
                    for name in ready {
                        match prepare(handle, &name, &run.task_outputs) {
                            Ok(launch) => {
                                run.task_states.insert(name.clone(), TaskState::Running);
                                let d = run.tasks.get_mut(&name).expect("task detail");
                                d.attempts = 1;
                                d.started_at = Some(now);
                                d.start_seq = Some(inner.seq.fetch_add(1, Ordering::SeqCst));
                                launches.push(launch);
                            }
                            Err(e) => {
                                finish_task(inner, &mut run, &name, TaskState::Failed, e.to_string());
                                failed = true;
                            }
                        }
                    }
                    if failed {
                        fail_run(&mut run);
                    }
                    if !failed && run.task_states.values().all(|s| *s == TaskState::Succeeded) {
                        run.state = WorkflowState::Succeeded;
                        run.finished_at = Some(inner.clock.now());
                        break;
                    }
                    if !failed && in_flight == 0 && launches.is_empty() {
                        run.state = WorkflowState::Failed;
                        run.detail = "no runnable tasks".into();
                        run.finished_at = Some(inner.clock.now());
                        break;
                    }
                }
                state => unreachable!("run loop in state {state:?}"),
            }
        }
        for launch in launches {
            in_flight += 1;
            spawn_attempt(inner, handle, launch, 1, tx.clone());
        }
        if in_flight == 0 {
            continue;
        }
        let event = rx.recv().expect("engine holds a sender");
        let Event::Done { task, result } = event else {
            continue;
        };
        let mut run = handle.run.lock();
        let cancelled = run.state == WorkflowState::Cancelled;
        match result {
            Ok(outputs) => {
                run.task_outputs.insert(task.clone(), outputs);
                finish_task(inner, &mut run, &task, TaskState::Succeeded, String::new());
                in_flight -= 1;
            }
            Err(detail) => {
                let attempts = run.tasks[&task].attempts;
                let limit = handle
                    .spec
                    .tasks
                    .iter()
                    .find(|t| t.name == task)
                    .and_then(|t| t.retry_limit)
                    .unwrap_or(inner.config.default_retry_limit);
                if !cancelled && attempts <= limit {
                    let d = run.tasks.get_mut(&task).expect("task detail");
                    d.attempts += 1;
                    d.detail = detail;
                    let attempt = d.attempts;
                    let prepared = prepare(handle, &task, &run.task_outputs);
                    drop(run);
                    match prepared {
                        Ok(launch) => spawn_attempt(inner, handle, launch, attempt, tx.clone()),
                        Err(e) => {
                            let _ = tx.send(Event::Done {
                                task,
                                result: Err(e.to_string()),
                            });
                        }
                    }
                    continue;
                }
                finish_task(inner, &mut run, &task, TaskState::Failed, detail);
                in_flight -= 1;
                if !cancelled {
                    failed = true;
                    fail_run(&mut run);
                }
            }
        }
    }

    *handle.events.lock() = None;
    let run = handle.run.lock();
    log::info!("workflow {} finished {:?}", run.workflow_id, run.state);
    handle.settled.notify_all();
}

fn fail_run(run: &mut WorkflowRun) {
    skip_unstarted(run);
    if run.detail.is_empty() {
        run.detail = "task failed".into();
    }
}

fn finish_task(inner: &Inner, run: &mut WorkflowRun, task: &str, state: TaskState, detail: String) {
    run.task_states.insert(task.to_string(), state);
    let d = run.tasks.get_mut(task).expect("task detail");
    d.finished_at = Some(inner.clock.now());
    d.finish_seq = Some(inner.seq.fetch_add(1, Ordering::SeqCst));
    d.detail = detail;
}

struct Launch {
    task: String,
    kind: TemplateKind,
    args: BTreeMap<String, String>,
    declared_outputs: Vec<String>,
}

/// Resolves a task's arguments against the outputs gathered so far.
/// Template defaults fill in arguments the task leaves out.
fn prepare(handle: &RunHandle, task: &str, outputs: &TaskOutputs) -> Result<Launch, super::Unresolved> {
    let node = handle.spec.tasks.iter().find(|t| t.name == task).expect("task in spec");
    let template = &handle.templates[&node.template_ref];
    let mut args = template.defaults.clone();
    for (k, v) in &node.arguments {
        args.insert(k.clone(), interpolate(v, outputs)?);
    }
    Ok(Launch {
        task: task.to_string(),
        kind: template.kind,
        args,
        declared_outputs: template.outputs.clone(),
    })
}

fn spawn_attempt(inner: &Arc<Inner>, handle: &Arc<RunHandle>, launch: Launch, attempt: u32, tx: Sender<Event>) {
    let inner = Arc::clone(inner);
    let handle = Arc::clone(handle);
    std::thread::spawn(move || {
        let result = catch_unwind(AssertUnwindSafe(|| run_task(&inner, &handle, &launch, attempt)))
            .unwrap_or_else(|_| Err("task panicked".to_string()));
        let _ = tx.send(Event::Done {
            task: launch.task,
            result,
        });
    });
}

type TaskResult = Result<BTreeMap<String, String>, String>;

fn run_task(inner: &Inner, handle: &RunHandle, launch: &Launch, attempt: u32) -> TaskResult {
    match launch.kind {
        TemplateKind::DeployStreaming => deploy_streaming(inner, handle, launch, attempt),
        TemplateKind::SubmitJob => submit_job(inner, handle, launch),
        TemplateKind::CheckJobStatus => check_job_status(inner, handle, launch),
        TemplateKind::ShellStep => {
            if launch.args.get("fail").map(String::as_str) == Some("true") {
                Err("shell step failed".into())
            } else {
                Ok(launch.args.clone())
            }
        }
    }
}

fn arg<T: std::str::FromStr>(args: &BTreeMap<String, String>, name: &str, default: T) -> Result<T, String> {
    match args.get(name) {
        None => Ok(default),
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| format!("argument {name}: cannot parse {v:?}")),
    }
}

/// A cluster name derived from the run and task, valid under the cluster naming rule.
fn default_cluster_name(workflow_id: &str, task: &str, attempt: u32) -> String {
    let mut name: String = format!("{workflow_id}-{task}")
        .to_ascii_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect();
    if attempt > 1 {
        name.push_str(&format!("-r{attempt}"));
    }
    name.truncate(63);
    name.trim_matches('-').to_string()
}

fn deploy_streaming(inner: &Inner, handle: &RunHandle, launch: &Launch, attempt: u32) -> TaskResult {
    let ctx = &handle.ctx;
    let args = &launch.args;
    let workflow_id = handle.run.lock().workflow_id.clone();
    let name = match args.get("cluster_name") {
        Some(n) => n.clone(),
        None => default_cluster_name(&workflow_id, &launch.task, attempt),
    };
    if !valid_cluster_name(&name) {
        return Err(format!("invalid cluster name {name:?}"));
    }
    let mut req = ClusterRequest::new(
        &name,
        arg(args, "node_count", 1)?,
        arg(args, "cpu_count", 1)?,
        arg(args, "ram_gib", 1.0)?,
    );
    if let Some(flavor) = args.get("service_name") {
        req.service_name = serde_json::from_value(serde_json::Value::String(flavor.clone()))
            .map_err(|_| format!("unknown service_name {flavor:?}"))?;
    }
    let decision = inner.policy.evaluate(
        ctx.claims(),
        STREAMING_RESOURCE,
        Scope::StreamingManage,
        inner.streaming.cost(&req),
    );
    if !decision.allowed {
        return Err(format!("policy denied ({}): {}", decision.rule_id, decision.reason));
    }
    let cluster = inner.streaming.start_cluster(ctx, req).map_err(|e| e.to_string())?;
    if !handle.register_cluster(&name) {
        let _ = inner
            .streaming
            .stop_in_project(ctx.project_id(), &name, "workflow cancelled");
        return Err("workflow cancelled".into());
    }
    if cluster.state != ClusterState::Running {
        return Err(format!("cluster {name} is {:?}: {}", cluster.state, cluster.detail));
    }
    Ok(BTreeMap::from([
        ("CLUSTER_NAME".to_string(), name),
        ("ENDPOINT".to_string(), cluster.endpoint.unwrap_or_default()),
    ]))
}

fn submit_job(inner: &Inner, handle: &RunHandle, launch: &Launch) -> TaskResult {
    let ctx = &handle.ctx;
    let args = &launch.args;
    let resource = match args.get("resource_id") {
        Some(r) => r.clone(),
        None => inner
            .facility
            .compute_resources()
            .into_iter()
            .next()
            .map(|(id, _)| id)
            .ok_or("no compute resource available")?,
    };
    let mut spec = JobSpec::new(
        &resource,
        arg(args, "nodes", 1)?,
        Duration::from_secs(arg(args, "wall_limit", 3600)?),
    )
    .with_command(args.get("command").map(String::as_str).unwrap_or(""))
    .with_sim_seconds(arg(args, "sim_seconds", 60)?);
    for name in &launch.declared_outputs {
        if name != JOB_ID_PARAM {
            if let Some(v) = args.get(name) {
                spec.output_params.insert(name.clone(), v.clone());
            }
        }
    }
    let decision = inner
        .policy
        .evaluate(ctx.claims(), &resource, Scope::ComputeSubmit, spec.cost());
    if !decision.allowed {
        return Err(format!("policy denied ({}): {}", decision.rule_id, decision.reason));
    }
    let record = inner.compute.submit_job(ctx, spec).map_err(|e| e.to_string())?;
    if !handle.register_job(&record.job_id) {
        let _ = inner.compute.cancel_in_project(ctx.project_id(), &record.job_id);
        return Err("workflow cancelled".into());
    }
    if arg(args, "wait", false)? {
        let done = poll_job(inner, handle, &record.job_id, inner.config.job_timeout, |id| {
            inner.compute.job_in_project(ctx.project_id(), id)
        })?;
        if done.state != JobState::Completed {
            return Err(format!(
                "job {} ended {:?}: {}",
                done.job_id, done.state, done.exit_detail
            ));
        }
        return Ok(done.outputs());
    }
    Ok(record.outputs())
}

fn check_job_status(inner: &Inner, handle: &RunHandle, launch: &Launch) -> TaskResult {
    let job_id = launch.args.get(JOB_ID_PARAM).ok_or("missing argument JOB_ID")?;
    let timeout = Duration::from_secs(arg(&launch.args, "timeout", inner.config.job_timeout.as_secs())?);
    let done = poll_job(inner, handle, job_id, timeout, |id| {
        inner.compute.get_job(&handle.ctx, id)
    })?;
    if done.state != JobState::Completed {
        return Err(format!("job {job_id} ended {:?}: {}", done.state, done.exit_detail));
    }
    let mut out = done.outputs();
    out.insert("JOB_STATE".into(), "COMPLETED".into());
    Ok(out)
}

fn poll_job<E: std::fmt::Display>(
    inner: &Inner,
    handle: &RunHandle,
    job_id: &str,
    timeout: Duration,
    fetch: impl Fn(&str) -> Result<crate::compute::JobRecord, E>,
) -> Result<crate::compute::JobRecord, String> {
    let deadline = inner.clock.now().saturating_add(timeout);
    let real_deadline = Instant::now() + inner.config.max_real_wait;
    loop {
        if handle.is_cancelled() {
            return Err("workflow cancelled".into());
        }
        let rec = fetch(job_id).map_err(|e| e.to_string())?;
        if rec.state.is_terminal() {
            return Ok(rec);
        }
        if inner.clock.now() >= deadline || Instant::now() >= real_deadline {
            return Err(format!("timed out waiting for job {job_id} ({:?})", rec.state));
        }
        std::thread::sleep(inner.config.poll_interval);
    }
}
