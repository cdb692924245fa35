use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use super::WorkflowError;

/// Built-in task kinds. Dispatch on kind happens in the engine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    DeployStreaming,
    SubmitJob,
    CheckJobStatus,
    ShellStep,
}

impl TemplateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::DeployStreaming => "deploy-streaming",
            TemplateKind::SubmitJob => "submit-job",
            TemplateKind::CheckJobStatus => "check-job-status",
            TemplateKind::ShellStep => "shell-step",
        }
    }

    /// Outputs the kind always produces, whatever the template declares.
    pub fn implicit_outputs(self) -> &'static [&'static str] {
        match self {
            TemplateKind::DeployStreaming => &["CLUSTER_NAME", "ENDPOINT"],
            TemplateKind::SubmitJob => &["JOB_ID"],
            TemplateKind::CheckJobStatus => &["JOB_ID", "JOB_STATE"],
            TemplateKind::ShellStep => &[],
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateKind {
    type Err = WorkflowError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            TemplateKind::DeployStreaming,
            TemplateKind::SubmitJob,
            TemplateKind::CheckJobStatus,
            TemplateKind::ShellStep,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| WorkflowError::UnknownKind(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowTemplate {
    pub template_name: String,
    pub kind: TemplateKind,
    #[serde(default)]
    pub parameters: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
    /// Argument values used when a task does not supply one.
    #[serde(default)]
    pub defaults: BTreeMap<String, String>,
}

impl WorkflowTemplate {
    pub fn new(name: &str, kind: TemplateKind) -> Self {
        WorkflowTemplate {
            template_name: name.to_string(),
            kind,
            parameters: Vec::new(),
            outputs: Vec::new(),
            defaults: BTreeMap::new(),
        }
    }

    pub fn with_parameters(mut self, params: &[&str]) -> Self {
        self.parameters = params.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_outputs(mut self, outputs: &[&str]) -> Self {
        self.outputs = outputs.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_default(mut self, key: &str, value: &str) -> Self {
        self.defaults.insert(key.to_string(), value.to_string());
        self
    }

    /// Output names dependents may interpolate. A shell step echoes its
    /// arguments, so its parameters count as outputs too.
    pub fn declared_outputs(&self) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = self.outputs.iter().cloned().collect();
        out.extend(self.kind.implicit_outputs().iter().map(|s| s.to_string()));
        if self.kind == TemplateKind::ShellStep {
            out.extend(self.parameters.iter().cloned());
        }
        out
    }
}

/// Wire form of a template registration; `kind` is checked on conversion.
#[derive(Clone, Debug, Deserialize)]
pub struct TemplateDraft {
    pub template_name: String,
    pub kind: String,
    #[serde(default)]
    pub parameters: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(default)]
    pub defaults: BTreeMap<String, String>,
}

impl TryFrom<TemplateDraft> for WorkflowTemplate {
    type Error = WorkflowError;

    fn try_from(d: TemplateDraft) -> Result<Self, Self::Error> {
        Ok(WorkflowTemplate {
            kind: d.kind.parse()?,
            template_name: d.template_name,
            parameters: d.parameters,
            outputs: d.outputs,
            defaults: d.defaults,
        })
    }
}

#[derive(Debug, Default)]
pub struct TemplateRegistry {
    templates: RwLock<BTreeMap<String, WorkflowTemplate>>,
}

impl TemplateRegistry {
    pub fn insert(&self, t: WorkflowTemplate) -> Result<(), WorkflowError> {
        if t.template_name.is_empty() {
            return Err(WorkflowError::InvalidTemplate("template_name must not be empty".into()));
        }
        let mut map = self.templates.write();
        if map.contains_key(&t.template_name) {
            return Err(WorkflowError::DuplicateTemplate(t.template_name));
        }
        map.insert(t.template_name.clone(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<WorkflowTemplate> {
        self.templates.read().get(name).cloned()
    }

    pub fn list(&self) -> Vec<WorkflowTemplate> {
        self.templates.read().values().cloned().collect()
    }

    pub fn snapshot(&self) -> BTreeMap<String, WorkflowTemplate> {
        self.templates.read().clone()
    }
}
