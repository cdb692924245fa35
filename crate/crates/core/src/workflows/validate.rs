use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::Serialize;

use super::document::WorkflowSpec;
use super::interpolate::references;
use super::template::WorkflowTemplate;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum ValidationError {
    EmptyWorkflow,
    EmptyTaskName,
    DuplicateTask {
        task: String,
    },
    SelfDependency {
        task: String,
    },
    UnknownDependency {
        task: String,
        dependency: String,
    },
    /// Members of one strongly connected component, sorted.
    Cycle {
        tasks: Vec<String>,
    },
    UnknownTemplate {
        task: String,
        template: String,
    },
    /// The referenced task is not an ancestor of the referencing task.
    DanglingInterpolation {
        task: String,
        reference: String,
        param: String,
    },
    /// The referenced ancestor's template does not declare the output.
    UndeclaredOutput {
        task: String,
        reference: String,
        param: String,
    },
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationError::EmptyWorkflow => write!(f, "workflow has no tasks"),
            ValidationError::EmptyTaskName => write!(f, "task name must not be empty"),
            ValidationError::DuplicateTask { task } => write!(f, "duplicate task name {task}"),
            ValidationError::SelfDependency { task } => write!(f, "task {task} depends on itself"),
            ValidationError::UnknownDependency { task, dependency } => {
                write!(f, "task {task} depends on unknown task {dependency}")
            }
            ValidationError::Cycle { tasks } => write!(f, "dependency cycle among {}", tasks.join(", ")),
            ValidationError::UnknownTemplate { task, template } => {
                write!(f, "task {task} references unknown template {template}")
            }
            ValidationError::DanglingInterpolation { task, reference, param } => write!(
                f,
                "task {task} reads {reference}.{param} but {reference} is not an upstream task"
            ),
            ValidationError::UndeclaredOutput { task, reference, param } => write!(
                f,
                "task {task} reads {reference}.{param} but that template does not declare {param}"
            ),
        }
    }
}

/// Checks a workflow against the template registry. Returns every problem
/// found, sorted and deduplicated; an empty list means the DAG is runnable.
pub fn validate_dag(spec: &WorkflowSpec, templates: &BTreeMap<String, WorkflowTemplate>) -> Vec<ValidationError> {
    let mut errors = BTreeSet::new();
    if spec.tasks.is_empty() {
        errors.insert(ValidationError::EmptyWorkflow);
    }

    let mut graph = DiGraph::<&str, ()>::new();
    let mut index = HashMap::new();
    for t in &spec.tasks {
        if t.name.is_empty() {
            errors.insert(ValidationError::EmptyTaskName);
        }
        if index.contains_key(t.name.as_str()) {
            errors.insert(ValidationError::DuplicateTask { task: t.name.clone() });
        } else {
            index.insert(t.name.as_str(), graph.add_node(t.name.as_str()));
        }
    }

    let mut deps: HashMap<&str, BTreeSet<&str>> = HashMap::new();
    for t in &spec.tasks {
        for d in &t.dependencies {
            if d == &t.name {
                errors.insert(ValidationError::SelfDependency { task: t.name.clone() });
                continue;
            }
            match index.get(d.as_str()) {
                Some(&from) => {
                    if deps.entry(t.name.as_str()).or_default().insert(d.as_str()) {
                        graph.add_edge(from, index[t.name.as_str()], ());
                    }
                }
                None => {
                    errors.insert(ValidationError::UnknownDependency {
                        task: t.name.clone(),
                        dependency: d.clone(),
                    });
                }
            }
        }
        if !templates.contains_key(&t.template_ref) {
            errors.insert(ValidationError::UnknownTemplate {
                task: t.name.clone(),
                template: t.template_ref.clone(),
            });
        }
    }

    for scc in tarjan_scc(&graph) {
        if scc.len() > 1 {
            let mut tasks: Vec<String> = scc.iter().map(|&n| graph[n].to_string()).collect();
            tasks.sort();
            errors.insert(ValidationError::Cycle { tasks });
        }
    }

    let template_of: HashMap<&str, &str> = spec
        .tasks
        .iter()
        .map(|t| (t.name.as_str(), t.template_ref.as_str()))
        .collect();
    for t in &spec.tasks {
        let ancestors = ancestors(t.name.as_str(), &deps);
        for value in t.arguments.values() {
            for r in references(value) {
                if !ancestors.contains(r.task.as_str()) {
                    errors.insert(ValidationError::DanglingInterpolation {
                        task: t.name.clone(),
                        reference: r.task,
                        param: r.param,
                    });
                    continue;
                }
                let declared = template_of
                    .get(r.task.as_str())
                    .and_then(|tpl| templates.get(*tpl))
                    .map(|tpl| tpl.declared_outputs().contains(&r.param));
                if declared == Some(false) {
                    errors.insert(ValidationError::UndeclaredOutput {
                        task: t.name.clone(),
                        reference: r.task,
                        param: r.param,
                    });
                }
            }
        }
    }

    errors.into_iter().collect()
}

fn ancestors<'a>(task: &'a str, deps: &HashMap<&'a str, BTreeSet<&'a str>>) -> BTreeSet<&'a str> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![task];
    while let Some(t) = stack.pop() {
        for &d in deps.get(t).into_iter().flatten() {
            if seen.insert(d) {
                stack.push(d);
            }
        }
    }
    seen.remove(task);
    seen
}
