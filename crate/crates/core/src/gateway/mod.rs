//! Request pipeline: route → authenticate → authorize → parse → policy →
//! dispatch. Every request, whatever its outcome, leaves exactly one audit
//! record.

mod audit;
mod routes;

pub use audit::{AuditFilter, AuditLog, AuditRecord, Decision};
pub use routes::{scope_table, Route, ENDPOINTS};

use std::collections::BTreeMap;
use std::fmt::Display;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::compute::JobSpec;
use crate::error::{Classify, ErrorKind};
use crate::mesh::Services;
use crate::policy::{PolicyDecision, ProjectSpec};
use crate::scope::{Scope, ScopeSet};
use crate::streaming::{ClusterRequest, STREAMING_RESOURCE};
use crate::time::Timestamp;
use crate::tokens::AuthContext;
use crate::workflows::{TemplateDraft, WorkflowDocument, WorkflowSpec, WorkflowTemplate};

pub const DEFAULT_RECEIVE_MAX: usize = 100;
pub const MAX_RECEIVE_WAIT: Duration = Duration::from_secs(30);

/// A transport-independent request.
#[derive(Clone, Debug, Default)]
pub struct ApiRequest {
    pub method: String,
    pub path: String,
    pub query: BTreeMap<String, String>,
    /// Raw `Authorization` header value.
    pub authorization: Option<String>,
    pub body: Vec<u8>,
}

impl ApiRequest {
    /// `target` may carry a URL-encoded query string. A repeated key keeps its last value.
    pub fn new(method: &str, target: &str) -> Self {
        let (path, query) = target.split_once('?').unwrap_or((target, ""));
        ApiRequest {
            method: method.to_ascii_uppercase(),
            path: path.to_string(),
            query: form_urlencoded::parse(query.as_bytes()).into_owned().collect(),
            authorization: None,
            body: Vec::new(),
        }
    }

    pub fn bearer(mut self, token: &str) -> Self {
        self.authorization = Some(format!("Bearer {token}"));
        self
    }

    pub fn json(mut self, body: &Value) -> Self {
        self.body = serde_json::to_vec(body).expect("json value serializes");
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Route,
    Authn,
    Authz,
    Parse,
    Policy,
    Dispatch,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Route,
        Stage::Authn,
        Stage::Authz,
        Stage::Parse,
        Stage::Policy,
        Stage::Dispatch,
    ];
}

#[derive(Clone, Debug)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Value,
    pub trace_id: String,
    pub decision: Decision,
    /// Stages entered while handling this request, in order.
    pub stages: Vec<Stage>,
}

#[derive(Debug)]
struct Rejection {
    status: u16,
    decision: Decision,
    code: &'static str,
    message: String,
    rule_id: Option<String>,
}

impl Rejection {
    fn new(status: u16, decision: Decision, code: &'static str, message: impl Into<String>) -> Self {
        Rejection {
            status,
            decision,
            code,
            message: message.into(),
            rule_id: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Rejection::new(400, Decision::Error, "bad_request", message)
    }

    fn policy(d: PolicyDecision) -> Self {
        Rejection {
            rule_id: Some(d.rule_id.to_string()),
            ..Rejection::new(403, Decision::RejectedPolicy, "policy_denied", d.reason)
        }
    }
}

/// Maps a service error raised after dispatch.
fn service<E: Classify + Display>(e: E) -> Rejection {
    let kind = e.kind();
    let decision = match kind {
        ErrorKind::PolicyDenied => Decision::RejectedPolicy,
        ErrorKind::Unauthenticated => Decision::RejectedAuthn,
        ErrorKind::Forbidden => Decision::RejectedAuthz,
        ErrorKind::Internal => Decision::Error,
        _ => Decision::Allowed,
    };
    Rejection::new(kind.http_status(), decision, e.code(), e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<Value, Rejection> {
    serde_json::to_value(v).map_err(|e| Rejection::new(500, Decision::Error, "internal", e.to_string()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DowntimeBody {
    start: Timestamp,
    end: Timestamp,
    #[serde(default)]
    reason: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PublishBody {
    payload: Option<String>,
    payloads: Option<Vec<String>>,
    text: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IssueBody {
    user_id: String,
    project_id: String,
    scopes: ScopeSet,
    ttl_seconds: Option<u64>,
}

enum Body {
    Empty,
    Downtime(DowntimeBody),
    Job(JobSpec),
    Cluster(ClusterRequest),
    Publish(Vec<Vec<u8>>),
    Issue(IssueBody),
    Workflow(WorkflowSpec),
    Template(WorkflowTemplate),
    Project(ProjectSpec),
}

fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, Rejection> {
    serde_json::from_slice(bytes).map_err(|e| Rejection::bad_request(format!("invalid request body: {e}")))
}

fn parse_body(route: &Route, bytes: &[u8]) -> Result<Body, Rejection> {
    Ok(match route {
        Route::ScheduleDowntime(_) => Body::Downtime(decode(bytes)?),
        Route::SubmitJob => Body::Job(decode(bytes)?),
        Route::StartCluster => Body::Cluster(decode(bytes)?),
        Route::Publish { .. } => {
            let b: PublishBody = decode(bytes)?;
            let payloads = match (b.payload, b.payloads, b.text) {
                (Some(p), None, None) => vec![p],
                (None, Some(ps), None) => ps,
                (None, None, Some(t)) => return Ok(Body::Publish(vec![t.into_bytes()])),
                _ => return Err(Rejection::bad_request("give exactly one of payload, payloads, text")),
            };
            Body::Publish(
                payloads
                    .iter()
                    .map(|p| B64.decode(p))
                    .collect::<Result<_, _>>()
                    .map_err(|e| Rejection::bad_request(format!("payload is not base64: {e}")))?,
            )
        }
        Route::IssueToken => Body::Issue(decode(bytes)?),
        Route::SubmitWorkflow => {
            let doc: WorkflowDocument = decode(bytes)?;
            Body::Workflow(WorkflowSpec::try_from(doc).map_err(|e| Rejection::bad_request(e.to_string()))?)
        }
        Route::RegisterTemplate => {
            let draft: TemplateDraft = decode(bytes)?;
            Body::Template(WorkflowTemplate::try_from(draft).map_err(|e| Rejection::bad_request(e.to_string()))?)
        }
        Route::RegisterProject => Body::Project(decode(bytes)?),
        _ => Body::Empty,
    })
}

#[derive(Debug, Default)]
struct StageCounters([AtomicU64; 6]);

#[derive(Debug)]
pub struct Gateway {
    services: Arc<Services>,
    counters: StageCounters,
    arrivals: AtomicU64,
}

impl Gateway {
    pub fn new(services: Arc<Services>) -> Self {
        Gateway {
            services,
            counters: StageCounters::default(),
            arrivals: AtomicU64::new(1),
        }
    }

    pub fn services(&self) -> &Arc<Services> {
        &self.services
    }

    /// How many requests have entered each stage since startup.
    pub fn stage_counts(&self) -> BTreeMap<&'static str, u64> {
        Stage::ALL
            .iter()
            .zip(&self.counters.0)
            .map(|(s, c)| {
                let name = match s {
                    Stage::Route => "route",
                    Stage::Authn => "authn",
                    Stage::Authz => "authz",
                    Stage::Parse => "parse",
                    Stage::Policy => "policy",
                    Stage::Dispatch => "dispatch",
                };
                (name, c.load(Ordering::Relaxed))
            })
            .collect()
    }

    pub fn handle(&self, req: ApiRequest) -> ApiResponse {
        let started = Instant::now();
        let seq = self.arrivals.fetch_add(1, Ordering::Relaxed);
        let received_at = self.services.clock.now();
        let trace_id = uuid::Uuid::new_v4().to_string();
        let mut stages = Vec::new();
        let mut caller: Option<(String, String)> = None;

        let outcome =
            catch_unwind(AssertUnwindSafe(|| self.pipeline(&req, &mut stages, &mut caller))).unwrap_or_else(|_| {
                log::error!("request {trace_id} panicked");
                Err(Rejection::new(500, Decision::Error, "internal", "internal error"))
            });

        let (status, body, decision, rule_id, detail) = match outcome {
            Ok((status, body)) => (status, body, Decision::Allowed, None, "ok".to_string()),
            Err(r) => {
                let mut body = json!({"error": r.code, "message": r.message, "trace_id": trace_id});
                if let Some(rule) = &r.rule_id {
                    body["rule_id"] = json!(rule);
                }
                (r.status, body, r.decision, r.rule_id, r.message)
            }
        };
        let (user_id, project_id) = caller.unwrap_or_else(|| ("anonymous".to_string(), String::new()));
        self.services.audit.append(AuditRecord {
            seq,
            trace_id: trace_id.clone(),
            timestamp: received_at,
            user_id,
            project_id,
            method: req.method.clone(),
            path: req.path.clone(),
            decision,
            status_code: status,
            rule_id,
            detail,
            latency_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        ApiResponse {
            status,
            body,
            trace_id,
            decision,
            stages,
        }
    }

    fn enter(&self, stages: &mut Vec<Stage>, stage: Stage) {
        self.counters.0[stage as usize].fetch_add(1, Ordering::Relaxed);
        stages.push(stage);
    }

    fn pipeline(
        &self,
        req: &ApiRequest,
        stages: &mut Vec<Stage>,
        caller: &mut Option<(String, String)>,
    ) -> Result<(u16, Value), Rejection> {
        self.enter(stages, Stage::Route);
        let route = Route::resolve(&req.method, &req.path).ok_or_else(|| {
            Rejection::new(
                404,
                Decision::Error,
                "unknown_endpoint",
                format!("unknown endpoint {} {}", req.method, req.path),
            )
        })?;

        self.enter(stages, Stage::Authn);
        let token = bearer(req.authorization.as_deref())?;
        let ctx = self
            .services
            .tokens
            .validate(token)
            .map_err(|e| Rejection::new(401, Decision::RejectedAuthn, e.code(), e.to_string()))?;
        *caller = Some((ctx.user_id().to_string(), ctx.project_id().to_string()));

        self.enter(stages, Stage::Authz);
        let scope = route.required_scope();
        if !ctx.has_scope(scope) {
            return Err(Rejection::new(
                403,
                Decision::RejectedAuthz,
                "insufficient_scope",
                format!("token lacks scope {scope}"),
            ));
        }

        self.enter(stages, Stage::Parse);
        let body = parse_body(&route, &req.body)?;

        self.enter(stages, Stage::Policy);
        let decision = self.policy_check(&ctx, &route, &body);
        if !decision.allowed {
            return Err(Rejection::policy(decision));
        }

        self.enter(stages, Stage::Dispatch);
        let status = route.success_status();
        let value = self.dispatch(&ctx, route, body, &req.query)?;
        Ok((status, value))
    }

    fn policy_check(&self, ctx: &AuthContext, route: &Route, body: &Body) -> PolicyDecision {
        let policy = &self.services.policy;
        match body {
            Body::Job(spec) => policy.evaluate(ctx.claims(), &spec.resource_id, Scope::ComputeSubmit, spec.cost()),
            Body::Cluster(req) => policy.evaluate(
                ctx.claims(),
                STREAMING_RESOURCE,
                Scope::StreamingManage,
                self.services.streaming.cost(req),
            ),
            _ => policy.evaluate_access(ctx.claims(), route.required_scope()),
        }
    }

    fn dispatch(
        &self,
        ctx: &AuthContext,
        route: Route,
        body: Body,
        query: &BTreeMap<String, String>,
    ) -> Result<Value, Rejection> {
        let s = &*self.services;
        let now = s.clock.now();
        match (route, body) {
            (Route::SystemStatus, _) => to_json(&s.facility.get_system_status(now)),
            (Route::ResourceStatus(r), _) => to_json(&s.facility.resource_status(&r, now).map_err(service)?),
            (Route::ListDowntimes(r), _) => to_json(&s.facility.list_downtimes(&r).map_err(service)?),
            (Route::ScheduleDowntime(r), Body::Downtime(b)) => to_json(
                &s.facility
                    .schedule_downtime(ctx, &r, b.start, b.end, &b.reason)
                    .map_err(service)?,
            ),
            (Route::Environment(r), _) => to_json(&s.facility.get_environment(&r).map_err(service)?),
            (Route::SubmitJob, Body::Job(spec)) => to_json(&s.compute.submit_job(ctx, spec).map_err(service)?),
            (Route::ListJobs, _) => to_json(&s.compute.list_jobs(ctx).map_err(service)?),
            (Route::GetJob(id), _) => to_json(&s.compute.get_job(ctx, &id).map_err(service)?),
            (Route::CancelJob(id), _) => to_json(&s.compute.cancel_job(ctx, &id).map_err(service)?),
            (Route::StartCluster, Body::Cluster(req)) => {
                to_json(&s.streaming.start_cluster(ctx, req).map_err(service)?)
            }
            (Route::ListClusters, _) => to_json(&s.streaming.list_clusters(ctx).map_err(service)?),
            (Route::GetCluster(name), _) => to_json(&s.streaming.get_cluster(ctx, &name).map_err(service)?),
            (Route::StopCluster(name), _) => to_json(&s.streaming.stop_cluster(ctx, &name).map_err(service)?),
            (Route::Publish { cluster, channel }, Body::Publish(payloads)) => {
                let mut seqs = Vec::with_capacity(payloads.len());
                for p in &payloads {
                    seqs.push(s.streaming.publish_to(ctx, &cluster, &channel, p).map_err(service)?);
                }
                Ok(json!({"seqs": seqs}))
            }
            (Route::Receive { cluster, channel }, _) => {
                let max = query_num(query, "max")?.unwrap_or(DEFAULT_RECEIVE_MAX as u64) as usize;
                let wait = Duration::from_millis(query_num(query, "wait_ms")?.unwrap_or(0)).min(MAX_RECEIVE_WAIT);
                let group = query.get("group").map(String::as_str);
                let msgs = s
                    .streaming
                    .receive_from(ctx, &cluster, &channel, group, max.max(1), wait)
                    .map_err(service)?;
                let msgs: Vec<Value> = msgs
                    .iter()
                    .map(|m| json!({"seq": m.seq, "payload": B64.encode(&m.payload)}))
                    .collect();
                Ok(json!({ "messages": msgs }))
            }
            (Route::IssueToken, Body::Issue(b)) => to_json(
                &s.tokens
                    .issue(
                        ctx,
                        &b.user_id,
                        &b.project_id,
                        b.scopes,
                        b.ttl_seconds.map(Duration::from_secs),
                    )
                    .map_err(service)?,
            ),
            (Route::ListTokens, _) => to_json(
                &s.tokens
                    .list(ctx, query.get("user_id").map(String::as_str))
                    .map_err(service)?,
            ),
            (Route::RevokeToken(id), _) => to_json(&s.tokens.revoke(ctx, &id).map_err(service)?),
            (Route::SubmitWorkflow, Body::Workflow(spec)) => {
                to_json(&s.workflows.submit_workflow(ctx, spec).map_err(service)?)
            }
            (Route::ListWorkflows, _) => to_json(&s.workflows.list_workflows(ctx).map_err(service)?),
            (Route::GetWorkflow(id), _) => to_json(&s.workflows.get_workflow(ctx, &id).map_err(service)?),
            (Route::CancelWorkflow(id), _) => to_json(&s.workflows.cancel_workflow(ctx, &id).map_err(service)?),
            (Route::RegisterTemplate, Body::Template(t)) => {
                s.workflows.register_template(ctx, t.clone()).map_err(service)?;
                to_json(&t)
            }
            (Route::ListTemplates, _) => to_json(&s.workflows.list_templates(ctx).map_err(service)?),
            (Route::RegisterProject, Body::Project(p)) => {
                let id = p.project_id.clone();
                s.policy.register_project(ctx, p).map_err(service)?;
                to_json(&s.policy.project(&id))
            }
            (Route::ListProjects, _) => to_json(&s.policy.projects()),
            (Route::QueryAudit, _) => {
                let decision = match query.get("decision") {
                    None => None,
                    Some(d) => Some(
                        Decision::parse(d).ok_or_else(|| Rejection::bad_request(format!("unknown decision {d:?}")))?,
                    ),
                };
                let filter = AuditFilter {
                    project_id: query.get("project_id").cloned(),
                    user_id: query.get("user_id").cloned(),
                    decision,
                };
                Ok(json!({ "records": s.audit.query(&filter) }))
            }
            (Route::Tick, _) => to_json(&s.tick()),
            (route, _) => unreachable!("body parsed for {route:?} does not match"),
        }
    }
}

fn bearer(header: Option<&str>) -> Result<&str, Rejection> {
    let header =
        header.ok_or_else(|| Rejection::new(401, Decision::RejectedAuthn, "missing_token", "missing bearer token"))?;
    match header.split_once(' ') {
        Some((scheme, token)) if scheme.eq_ignore_ascii_case("bearer") && !token.trim().is_empty() => Ok(token.trim()),
        _ => Err(Rejection::new(
            401,
            Decision::RejectedAuthn,
            "missing_token",
            "authorization header is not a bearer token",
        )),
    }
}

fn query_num(query: &BTreeMap<String, String>, key: &str) -> Result<Option<u64>, Rejection> {
    query
        .get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| Rejection::bad_request(format!("query parameter {key} must be a non-negative integer")))
        })
        .transpose()
}
