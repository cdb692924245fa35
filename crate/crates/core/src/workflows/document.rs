//! Workflow document: the JSON form of a DAG definition.
//!
//! ```json
//! {"kind": "Workflow",
//!  "spec": {"templates": {"dag": {"tasks": [
//!    {"name": "submit-job",
//!     "templateRef": {"template": "submit-job"},
//!     "dependencies": ["deploy-streaming-service"],
//!     "arguments": {"parameters": [{"name": "JOB_ID", "value": "..."}]},
//!     "retryLimit": 1}]}}}}
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::WorkflowError;

pub const DOCUMENT_KIND: &str = "Workflow";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowDocument {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<DocumentMetadata>,
    pub spec: DocumentSpec,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentMetadata {
    #[serde(default)]
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentSpec {
    pub templates: DocumentTemplates,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentTemplates {
    pub dag: DocumentDag,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentDag {
    pub tasks: Vec<DocumentTask>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DocumentTask {
    pub name: String,
    pub template_ref: TemplateRef,
    #[serde(default)]
    pub dependencies: Vec<String>,
    #[serde(default)]
    pub arguments: Arguments,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_limit: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateRef {
    pub template: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arguments {
    #[serde(default)]
    pub parameters: Vec<Parameter>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: String,
}

/// One node of a workflow DAG.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskNode {
    pub name: String,
    pub template_ref: String,
    pub dependencies: Vec<String>,
    pub arguments: BTreeMap<String, String>,
    pub retry_limit: Option<u32>,
}

impl TaskNode {
    pub fn new(name: &str, template: &str) -> Self {
        TaskNode {
            name: name.to_string(),
            template_ref: template.to_string(),
            dependencies: Vec::new(),
            arguments: BTreeMap::new(),
            retry_limit: None,
        }
    }

    pub fn after(mut self, deps: &[&str]) -> Self {
        self.dependencies.extend(deps.iter().map(|s| s.to_string()));
        self
    }

    pub fn arg(mut self, name: &str, value: &str) -> Self {
        self.arguments.insert(name.to_string(), value.to_string());
        self
    }

    pub fn retries(mut self, limit: u32) -> Self {
        self.retry_limit = Some(limit);
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowSpec {
    #[serde(default)]
    pub name: String,
    pub tasks: Vec<TaskNode>,
}

impl WorkflowSpec {
    pub fn new(tasks: Vec<TaskNode>) -> Self {
        WorkflowSpec {
            name: String::new(),
            tasks,
        }
    }

    pub fn to_document(&self) -> WorkflowDocument {
        WorkflowDocument {
            kind: DOCUMENT_KIND.to_string(),
            metadata: (!self.name.is_empty()).then(|| DocumentMetadata {
                name: self.name.clone(),
            }),
            spec: DocumentSpec {
                templates: DocumentTemplates {
                    dag: DocumentDag {
                        tasks: self
                            .tasks
                            .iter()
                            .map(|t| DocumentTask {
                                name: t.name.clone(),
                                template_ref: TemplateRef {
                                    template: t.template_ref.clone(),
                                },
                                dependencies: t.dependencies.clone(),
                                arguments: Arguments {
                                    parameters: t
                                        .arguments
                                        .iter()
                                        .map(|(k, v)| Parameter {
                                            name: k.clone(),
                                            value: v.clone(),
                                        })
                                        .collect(),
                                },
                                retry_limit: t.retry_limit,
                            })
                            .collect(),
                    },
                },
            },
        }
    }
}

impl TryFrom<WorkflowDocument> for WorkflowSpec {
    type Error = WorkflowError;

    fn try_from(doc: WorkflowDocument) -> Result<Self, Self::Error> {
        if doc.kind != DOCUMENT_KIND {
            return Err(WorkflowError::BadDocument(format!(
                "kind must be \"{DOCUMENT_KIND}\", got \"{}\"",
                doc.kind
            )));
        }
        let mut tasks = Vec::with_capacity(doc.spec.templates.dag.tasks.len());
        for t in doc.spec.templates.dag.tasks {
            let mut arguments = BTreeMap::new();
            for p in t.arguments.parameters {
                if arguments.insert(p.name.clone(), p.value).is_some() {
                    return Err(WorkflowError::BadDocument(format!(
                        "task {} repeats argument {}",
                        t.name, p.name
                    )));
                }
            }
            tasks.push(TaskNode {
                name: t.name,
                template_ref: t.template_ref.template,
                dependencies: t.dependencies,
                arguments,
                retry_limit: t.retry_limit,
            });
        }
        Ok(WorkflowSpec {
            name: doc.metadata.map(|m| m.name).unwrap_or_default(),
            tasks,
        })
    }
}

impl WorkflowSpec {
    pub fn from_json(json: &[u8]) -> Result<Self, WorkflowError> {
        let doc: WorkflowDocument =
            serde_json::from_slice(json).map_err(|e| WorkflowError::BadDocument(e.to_string()))?;
        doc.try_into()
    }
}
