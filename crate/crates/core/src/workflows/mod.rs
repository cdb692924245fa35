//! DAG workflows over the compute and streaming services.

mod document;
mod engine;
mod interpolate;
mod template;
mod validate;

pub use document::{
    Arguments, DocumentDag, DocumentMetadata, DocumentSpec, DocumentTask, DocumentTemplates, Parameter, TaskNode,
    TemplateRef, WorkflowDocument, WorkflowSpec, DOCUMENT_KIND,
};
pub use engine::{EngineConfig, TaskDetail, TaskState, WorkflowEngine, WorkflowRun, WorkflowState};
pub use interpolate::{interpolate, references, ParamRef, TaskOutputs, Unresolved};
pub use template::{TemplateDraft, TemplateKind, TemplateRegistry, WorkflowTemplate};
pub use validate::{validate_dag, ValidationError};

use crate::error::{Classify, ErrorKind};
use crate::scope::Scope;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WorkflowError {
    #[error("unknown template kind {0:?}")]
    UnknownKind(String),
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("template {0:?} already exists")]
    DuplicateTemplate(String),
    #[error("malformed workflow document: {0}")]
    BadDocument(String),
    #[error("invalid workflow: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<ValidationError>),
    #[error("workflow {0} not found")]
    NotFound(String),
    #[error("workflow {workflow_id} is already {state:?}")]
    AlreadyTerminal { workflow_id: String, state: WorkflowState },
    #[error("missing required scope {0}")]
    InsufficientScope(Scope),
}

impl Classify for WorkflowError {
    fn kind(&self) -> ErrorKind {
        match self {
            WorkflowError::UnknownKind(_)
            | WorkflowError::InvalidTemplate(_)
            | WorkflowError::BadDocument(_)
            | WorkflowError::Invalid(_) => ErrorKind::BadRequest,
            WorkflowError::DuplicateTemplate(_) | WorkflowError::AlreadyTerminal { .. } => ErrorKind::Conflict,
            WorkflowError::NotFound(_) => ErrorKind::NotFound,
            WorkflowError::InsufficientScope(_) => ErrorKind::Forbidden,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            WorkflowError::UnknownKind(_) => "unknown_kind",
            WorkflowError::InvalidTemplate(_) => "invalid_template",
            WorkflowError::DuplicateTemplate(_) => "duplicate_template",
            WorkflowError::BadDocument(_) => "bad_document",
            WorkflowError::Invalid(_) => "invalid_workflow",
            WorkflowError::NotFound(_) => "not_found",
            WorkflowError::AlreadyTerminal { .. } => "conflict",
            WorkflowError::InsufficientScope(_) => "insufficient_scope",
        }
    }
}
