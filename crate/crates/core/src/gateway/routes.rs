//! Endpoint table: method + path → route, and the scope each route needs.

use crate::scope::Scope;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Route {
    SystemStatus,
    ResourceStatus(String),
    ListDowntimes(String),
    ScheduleDowntime(String),
    Environment(String),
    SubmitJob,
    ListJobs,
    GetJob(String),
    CancelJob(String),
    StartCluster,
    ListClusters,
    GetCluster(String),
    StopCluster(String),
    Publish { cluster: String, channel: String },
    Receive { cluster: String, channel: String },
    IssueToken,
    ListTokens,
    RevokeToken(String),
    SubmitWorkflow,
    ListWorkflows,
    GetWorkflow(String),
    CancelWorkflow(String),
    RegisterTemplate,
    ListTemplates,
    RegisterProject,
    ListProjects,
    QueryAudit,
    Tick,
}

impl Route {
    /// Matches a method and path. Trailing slashes are ignored; literal
    /// segments win over parameters.
    pub fn resolve(method: &str, path: &str) -> Option<Route> {
        let segs: Vec<&str> = path.split('/').filter(|s| !s.is_empty()).collect();
        let own = |s: &str| s.to_string();
        let route = match (method, segs.as_slice()) {
            ("GET", ["status"]) => Route::SystemStatus,
            ("GET", ["status", r]) => Route::ResourceStatus(own(r)),
            ("GET", ["status", r, "downtimes"]) => Route::ListDowntimes(own(r)),
            ("POST", ["status", r, "downtimes"]) => Route::ScheduleDowntime(own(r)),
            ("GET", ["environment", r]) => Route::Environment(own(r)),
            ("POST", ["compute", "jobs"]) => Route::SubmitJob,
            ("GET", ["compute", "jobs"]) => Route::ListJobs,
            ("GET", ["compute", "jobs", j]) => Route::GetJob(own(j)),
            ("DELETE", ["compute", "jobs", j]) => Route::CancelJob(own(j)),
            ("POST", ["streaming", "clusters"]) => Route::StartCluster,
            ("GET", ["streaming", "clusters"]) => Route::ListClusters,
            ("GET", ["streaming", "clusters", c]) => Route::GetCluster(own(c)),
            ("DELETE", ["streaming", "clusters", c]) => Route::StopCluster(own(c)),
            ("POST", ["streaming", "clusters", c, "channels", ch, "messages"]) => Route::Publish {
                cluster: own(c),
                channel: own(ch),
            },
            ("GET", ["streaming", "clusters", c, "channels", ch, "messages"]) => Route::Receive {
                cluster: own(c),
                channel: own(ch),
            },
            ("POST", ["tokens"]) => Route::IssueToken,
            ("GET", ["tokens"]) => Route::ListTokens,
            ("DELETE", ["tokens", t]) => Route::RevokeToken(own(t)),
            ("POST", ["workflows"]) => Route::SubmitWorkflow,
            ("GET", ["workflows"]) => Route::ListWorkflows,
            ("POST", ["workflows", "templates"]) => Route::RegisterTemplate,
            ("GET", ["workflows", "templates"]) => Route::ListTemplates,
            ("GET", ["workflows", w]) => Route::GetWorkflow(own(w)),
            ("DELETE", ["workflows", w]) => Route::CancelWorkflow(own(w)),
            ("POST", ["admin", "projects"]) => Route::RegisterProject,
            ("GET", ["admin", "projects"]) => Route::ListProjects,
            ("GET", ["admin", "audit"]) => Route::QueryAudit,
            ("POST", ["admin", "tick"]) => Route::Tick,
            _ => return None,
        };
        Some(route)
    }

    pub fn required_scope(&self) -> Scope {
        match self {
            Route::SystemStatus | Route::ResourceStatus(_) | Route::ListDowntimes(_) => Scope::StatusRead,
            Route::Environment(_) => Scope::EnvironmentRead,
            Route::SubmitJob => Scope::ComputeSubmit,
            Route::ListJobs | Route::GetJob(_) => Scope::ComputeRead,
            Route::CancelJob(_) => Scope::ComputeCancel,
            Route::StartCluster | Route::StopCluster(_) | Route::Publish { .. } => Scope::StreamingManage,
            Route::ListClusters | Route::GetCluster(_) | Route::Receive { .. } => Scope::StreamingRead,
            Route::SubmitWorkflow | Route::CancelWorkflow(_) | Route::RegisterTemplate => Scope::WorkflowsManage,
            Route::ListWorkflows | Route::GetWorkflow(_) | Route::ListTemplates => Scope::WorkflowsRead,
            Route::ScheduleDowntime(_)
            | Route::IssueToken
            | Route::ListTokens
            | Route::RevokeToken(_)
            | Route::RegisterProject
            | Route::ListProjects
            | Route::QueryAudit
            | Route::Tick => Scope::TokensManage,
        }
    }

    /// Status returned on success.
    pub fn success_status(&self) -> u16 {
        match self {
            Route::ScheduleDowntime(_)
            | Route::SubmitJob
            | Route::StartCluster
            | Route::IssueToken
            | Route::SubmitWorkflow
            | Route::RegisterTemplate
            | Route::RegisterProject => 201,
            _ => 200,
        }
    }
}

/// One row per endpoint: `METHOD path-template scope`.
pub const ENDPOINTS: &[(&str, &str)] = &[
    ("GET", "/status"),
    ("GET", "/status/{resource_id}"),
    ("GET", "/status/{resource_id}/downtimes"),
    ("POST", "/status/{resource_id}/downtimes"),
    ("GET", "/environment/{resource_id}"),
    ("POST", "/compute/jobs"),
    ("GET", "/compute/jobs"),
    ("GET", "/compute/jobs/{job_id}"),
    ("DELETE", "/compute/jobs/{job_id}"),
    ("POST", "/streaming/clusters"),
    ("GET", "/streaming/clusters"),
    ("GET", "/streaming/clusters/{cluster_name}"),
    ("DELETE", "/streaming/clusters/{cluster_name}"),
    ("POST", "/streaming/clusters/{cluster_name}/channels/{channel}/messages"),
    ("GET", "/streaming/clusters/{cluster_name}/channels/{channel}/messages"),
    ("POST", "/tokens"),
    ("GET", "/tokens"),
    ("DELETE", "/tokens/{token_id}"),
    ("POST", "/workflows"),
    ("GET", "/workflows"),
    ("GET", "/workflows/{workflow_id}"),
    ("DELETE", "/workflows/{workflow_id}"),
    ("POST", "/workflows/templates"),
    ("GET", "/workflows/templates"),
    ("POST", "/admin/projects"),
    ("GET", "/admin/projects"),
    ("GET", "/admin/audit"),
    ("POST", "/admin/tick"),
];

/// Renders the endpoint table with required scopes, one line per endpoint.
pub fn scope_table() -> String {
    let mut out = String::new();
    for (method, template) in ENDPOINTS {
        let concrete = template
            .replace("{resource_id}", "r")
            .replace("{job_id}", "j")
            .replace("{cluster_name}", "c")
            .replace("{channel}", "ch")
            .replace("{token_id}", "t")
            .replace("{workflow_id}", "w");
        let route = Route::resolve(method, &concrete).expect("table entry resolves");
        out.push_str(&format!("{method:<6} {template:<66} {}\n", route.required_scope()));
    }
    out
}
