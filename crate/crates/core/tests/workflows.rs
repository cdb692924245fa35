mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use common::{eventually, Fixture};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use s3m_core::compute::JobState;
use s3m_core::scope::Scope;
use s3m_core::streaming::ClusterState;
use s3m_core::workflows::{
    interpolate, validate_dag, TaskNode, TaskOutputs, TaskState, TemplateKind, ValidationError, WorkflowError,
    WorkflowRun, WorkflowSpec, WorkflowState, WorkflowTemplate,
};

const WAIT: Duration = Duration::from_secs(20);

fn register_pipeline_templates(fx: &Fixture) {
    let alice = fx.alice();
    for t in [
        WorkflowTemplate::new("deploy-streaming", TemplateKind::DeployStreaming),
        WorkflowTemplate::new("submit-job", TemplateKind::SubmitJob),
        WorkflowTemplate::new("check-job-status", TemplateKind::CheckJobStatus),
        WorkflowTemplate::new("echo", TemplateKind::ShellStep).with_parameters(&["msg", "fail"]),
    ] {
        fx.s().workflows.register_template(&alice, t).unwrap();
    }
}

fn run(fx: &Fixture, tasks: Vec<TaskNode>) -> WorkflowRun {
    let submitted = fx
        .s()
        .workflows
        .submit_workflow(&fx.alice(), WorkflowSpec::new(tasks))
        .unwrap();
    let done = fx.s().workflows.wait(&submitted.workflow_id, WAIT).unwrap();
    assert!(done.state.is_terminal(), "run did not finish: {done:?}");
    done
}

#[test]
fn pipeline_passes_job_id_downstream() {
    let fx = Fixture::new();
    register_pipeline_templates(&fx);
    let _driver = fx.drive(Duration::from_secs(5));
    let done = run(
        &fx,
        vec![
            TaskNode::new("deploy-streaming-service", "deploy-streaming"),
            TaskNode::new("submit-job", "submit-job")
                .after(&["deploy-streaming-service"])
                .arg("resource_id", "frontier"),
            TaskNode::new("check-job-status", "check-job-status")
                .after(&["submit-job"])
                .arg("JOB_ID", "{{tasks.submit-job.outputs.params.JOB_ID}}"),
        ],
    );
    assert_eq!(done.state, WorkflowState::Succeeded, "{done:?}");
    let job_id = &done.task_outputs["submit-job"]["JOB_ID"];
    assert_eq!(&done.task_outputs["check-job-status"]["JOB_ID"], job_id);
    assert_eq!(done.task_outputs["check-job-status"]["JOB_STATE"], "COMPLETED");
    assert_eq!(done.jobs, vec![job_id.clone()]);
    let cluster = &done.task_outputs["deploy-streaming-service"]["CLUSTER_NAME"];
    let c = fx.s().streaming.get_cluster(&fx.alice(), cluster).unwrap();
    assert_eq!(c.state, ClusterState::Running);
}

#[test]
fn diamond_branches_overlap() {
    let fx = Fixture::new();
    register_pipeline_templates(&fx);
    let done = run(
        &fx,
        vec![
            TaskNode::new("a", "echo"),
            TaskNode::new("b", "echo").after(&["a"]),
            TaskNode::new("c", "echo").after(&["a"]),
            TaskNode::new("d", "echo").after(&["b", "c"]),
        ],
    );
    assert_eq!(done.state, WorkflowState::Succeeded);
    let t = |n: &str| {
        let d = &done.tasks[n];
        (d.start_seq.unwrap(), d.finish_seq.unwrap())
    };
    let (a, b, c, d) = (t("a"), t("b"), t("c"), t("d"));
    assert!(a.1 < b.0 && a.1 < c.0);
    assert!(b.0 < c.1 && c.0 < b.1, "b {b:?} and c {c:?} do not overlap");
    assert!(d.0 > b.1 && d.0 > c.1);
}

#[test]
fn failing_job_is_retried_then_downstream_skipped() {
    let fx = Fixture::new();
    register_pipeline_templates(&fx);
    let _driver = fx.drive(Duration::from_secs(5));
    let done = run(
        &fx,
        vec![
            TaskNode::new("prep", "echo"),
            TaskNode::new("job", "submit-job")
                .after(&["prep"])
                .arg("resource_id", "defiant")
                .arg("command", "fail")
                .arg("wait", "true")
                .retries(1),
            TaskNode::new("post", "echo").after(&["job"]),
        ],
    );
    assert_eq!(done.state, WorkflowState::Failed);
    assert_eq!(done.tasks["job"].attempts, 2);
    assert_eq!(done.task_states["job"], TaskState::Failed);
    assert_eq!(done.task_states["post"], TaskState::Skipped);
    assert_eq!(done.jobs.len(), 2);
    for id in &done.jobs {
        assert_eq!(fx.s().compute.get_job(&fx.alice(), id).unwrap().state, JobState::Failed);
    }
}

#[test]
fn retry_limit_zero_means_one_attempt() {
    let fx = Fixture::new();
    register_pipeline_templates(&fx);
    let done = run(&fx, vec![TaskNode::new("x", "echo").arg("fail", "true").retries(0)]);
    assert_eq!(done.state, WorkflowState::Failed);
    assert_eq!(done.tasks["x"].attempts, 1);
    let done = run(&fx, vec![TaskNode::new("x", "echo").arg("fail", "true").retries(3)]);
    assert_eq!(done.tasks["x"].attempts, 4);
}

#[test]
fn started_sibling_finishes_after_failure() {
    let fx = Fixture::new();
    register_pipeline_templates(&fx);
    let done = run(
        &fx,
        vec![
            TaskNode::new("a", "echo"),
            TaskNode::new("bad", "echo")
                .after(&["a"])
                .arg("fail", "true")
                .retries(0),
            TaskNode::new("good", "echo").after(&["a"]),
            TaskNode::new("join", "echo").after(&["bad", "good"]),
        ],
    );
    assert_eq!(done.state, WorkflowState::Failed);
    assert_eq!(done.task_states["good"], TaskState::Succeeded);
    assert_eq!(done.task_states["join"], TaskState::Skipped);
}

#[test]
fn missing_declared_output_fails_task_not_engine() {
    let fx = Fixture::new();
    register_pipeline_templates(&fx);
    fx.s()
        .workflows
        .register_template(
            &fx.alice(),
            WorkflowTemplate::new("job-with-result", TemplateKind::SubmitJob).with_outputs(&["RESULT"]),
        )
        .unwrap();
    let done = run(
        &fx,
        vec![
            TaskNode::new("job", "job-with-result").arg("resource_id", "defiant"),
            TaskNode::new("use", "echo")
                .after(&["job"])
                .arg("msg", "{{tasks.job.outputs.params.RESULT}}"),
        ],
    );
    assert_eq!(done.state, WorkflowState::Failed);
    assert_eq!(done.task_states["use"], TaskState::Failed);
    assert!(done.tasks["use"].detail.contains("unresolved parameter"));
}

#[test]
fn cancel_mid_chain_cancels_started_job() {
    let fx = Fixture::new();
    register_pipeline_templates(&fx);
    let _driver = fx.drive(Duration::from_secs(1));
    let alice = fx.alice();
    let run = fx
        .s()
        .workflows
        .submit_workflow(
            &alice,
            WorkflowSpec::new(vec![
                TaskNode::new("submit", "submit-job")
                    .arg("resource_id", "defiant")
                    .arg("wall_limit", "100000")
                    .arg("sim_seconds", "100000"),
                TaskNode::new("check", "check-job-status")
                    .after(&["submit"])
                    .arg("JOB_ID", "{{tasks.submit.outputs.params.JOB_ID}}")
                    .arg("timeout", "1000000"),
                TaskNode::new("after", "echo").after(&["check"]),
            ]),
        )
        .unwrap();
    let id = run.workflow_id.clone();
    assert!(eventually(WAIT, || {
        fx.s().workflows.get_workflow(&alice, &id).unwrap().task_states["check"] == TaskState::Running
    }));
    let cancelled = fx.s().workflows.cancel_workflow(&alice, &id).unwrap();
    assert_eq!(cancelled.state, WorkflowState::Cancelled);
    assert_eq!(cancelled.task_states["after"], TaskState::Skipped);
    let job = &cancelled.jobs[0];
    assert_eq!(fx.s().compute.get_job(&alice, job).unwrap().state, JobState::Cancelled);
    assert!(matches!(
        fx.s().workflows.cancel_workflow(&alice, &id),
        Err(WorkflowError::AlreadyTerminal { .. })
    ));
    // the in-flight check task winds down without reviving the run
    assert!(eventually(WAIT, || {
        fx.s().workflows.get_workflow(&alice, &id).unwrap().task_states["check"] != TaskState::Running
    }));
    assert_eq!(
        fx.s().workflows.get_workflow(&alice, &id).unwrap().state,
        WorkflowState::Cancelled
    );
}

#[test]
fn cancel_stops_started_clusters() {
    let fx = Fixture::new();
    register_pipeline_templates(&fx);
    let _driver = fx.drive(Duration::from_secs(1));
    let alice = fx.alice();
    let run = fx
        .s()
        .workflows
        .submit_workflow(
            &alice,
            WorkflowSpec::new(vec![
                TaskNode::new("deploy", "deploy-streaming").arg("cluster_name", "wf-stream"),
                TaskNode::new("submit", "submit-job")
                    .after(&["deploy"])
                    .arg("resource_id", "defiant")
                    .arg("wall_limit", "100000")
                    .arg("sim_seconds", "100000")
                    .arg("wait", "true"),
            ]),
        )
        .unwrap();
    let id = run.workflow_id;
    assert!(eventually(WAIT, || {
        fx.s().workflows.get_workflow(&alice, &id).unwrap().task_states["submit"] == TaskState::Running
    }));
    let cancelled = fx.s().workflows.cancel_workflow(&alice, &id).unwrap();
    assert_eq!(cancelled.clusters, vec!["wf-stream".to_string()]);
    let c = fx.s().streaming.get_cluster(&alice, "wf-stream").unwrap();
    assert_eq!(c.state, ClusterState::Stopped);
    assert!(eventually(WAIT, || {
        let run = fx.s().workflows.get_workflow(&alice, &id).unwrap();
        run.task_states["submit"] == TaskState::Failed
            && run
                .jobs
                .iter()
                .all(|j| fx.s().compute.get_job(&alice, j).unwrap().state == JobState::Cancelled)
    }));
}

#[test]
fn cancel_of_finished_run_conflicts() {
    let fx = Fixture::new();
    register_pipeline_templates(&fx);
    let done = run(&fx, vec![TaskNode::new("only", "echo").arg("msg", "hi")]);
    assert_eq!(done.state, WorkflowState::Succeeded);
    assert_eq!(done.task_outputs["only"]["msg"], "hi");
    let err = fx
        .s()
        .workflows
        .cancel_workflow(&fx.alice(), &done.workflow_id)
        .unwrap_err();
    assert!(matches!(err, WorkflowError::AlreadyTerminal { .. }));
    let after = fx.s().workflows.get_workflow(&fx.alice(), &done.workflow_id).unwrap();
    assert_eq!(after, done);
}

#[test]
fn invalid_workflow_is_not_recorded() {
    let fx = Fixture::new();
    register_pipeline_templates(&fx);
    let alice = fx.alice();
    let err = fx
        .s()
        .workflows
        .submit_workflow(
            &alice,
            WorkflowSpec::new(vec![
                TaskNode::new("a", "echo").after(&["b"]),
                TaskNode::new("b", "echo").after(&["a"]),
            ]),
        )
        .unwrap_err();
    assert_eq!(
        err,
        WorkflowError::Invalid(vec![ValidationError::Cycle {
            tasks: vec!["a".into(), "b".into()]
        }])
    );
    assert!(fx.s().workflows.list_workflows(&alice).unwrap().is_empty());
}

#[test]
fn concurrent_submissions_get_distinct_ids() {
    let fx = Fixture::new();
    register_pipeline_templates(&fx);
    let ids: Vec<String> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..5)
            .map(|i| {
                let fx = &fx;
                s.spawn(move || {
                    let spec = WorkflowSpec::new(vec![TaskNode::new("t", "echo").arg("msg", &i.to_string())]);
                    fx.s().workflows.submit_workflow(&fx.alice(), spec).unwrap().workflow_id
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), 5);
    for id in &ids {
        assert_eq!(fx.s().workflows.wait(id, WAIT).unwrap().state, WorkflowState::Succeeded);
    }
}

#[test]
fn runs_are_project_scoped() {
    let fx = Fixture::new();
    register_pipeline_templates(&fx);
    let done = run(&fx, vec![TaskNode::new("t", "echo")]);
    let bob = fx.ctx("bob", "proj-b", &Scope::ALL);
    assert!(matches!(
        fx.s().workflows.get_workflow(&bob, &done.workflow_id),
        Err(WorkflowError::NotFound(_))
    ));
    assert!(fx.s().workflows.list_workflows(&bob).unwrap().is_empty());
}

#[test]
fn template_registration_rules() {
    let fx = Fixture::new();
    register_pipeline_templates(&fx);
    let reader = fx.ctx("alice", "proj-a", &[Scope::WorkflowsRead]);
    assert_eq!(
        fx.s()
            .workflows
            .register_template(&reader, WorkflowTemplate::new("x", TemplateKind::ShellStep)),
        Err(WorkflowError::InsufficientScope(Scope::WorkflowsManage))
    );
    assert_eq!(
        fx.s()
            .workflows
            .register_template(&fx.alice(), WorkflowTemplate::new("echo", TemplateKind::ShellStep)),
        Err(WorkflowError::DuplicateTemplate("echo".into()))
    );
    assert_eq!(fx.s().workflows.list_templates(&reader).unwrap().len(), 4);
}

/// Random DAG over `n` tasks: edges only from lower to higher index.
fn random_dag(rng: &mut StdRng, n: usize) -> Vec<TaskNode> {
    (0..n)
        .map(|i| {
            let deps: Vec<String> = (0..i)
                .filter(|_| rng.random_bool(0.3))
                .map(|j| format!("t{j}"))
                .collect();
            let mut t = TaskNode::new(&format!("t{i}"), "echo").arg("msg", &format!("v{i}"));
            t.dependencies = deps;
            t
        })
        .collect()
}

fn ancestors(tasks: &[TaskNode], i: usize) -> BTreeSet<usize> {
    let idx = |n: &str| n[1..].parse::<usize>().unwrap();
    let mut seen = BTreeSet::new();
    let mut stack = vec![i];
    while let Some(k) = stack.pop() {
        for d in &tasks[k].dependencies {
            if seen.insert(idx(d)) {
                stack.push(idx(d));
            }
        }
    }
    seen
}

#[test]
fn random_dags_complete_in_topological_order() {
    let fx = Fixture::new();
    register_pipeline_templates(&fx);
    let mut rng = StdRng::seed_from_u64(7);
    for _ in 0..60 {
        let n = rng.random_range(1..=12);
        let tasks = random_dag(&mut rng, n);
        let done = run(&fx, tasks.clone());
        assert_eq!(done.state, WorkflowState::Succeeded);
        let mut order: Vec<(u64, &str)> = done
            .tasks
            .iter()
            .map(|(name, d)| (d.finish_seq.unwrap(), name.as_str()))
            .collect();
        order.sort();
        let pos: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, (_, n))| (*n, i)).collect();
        for t in &tasks {
            for d in &t.dependencies {
                assert!(pos[d.as_str()] < pos[t.name.as_str()]);
                assert!(done.tasks[d].finish_seq < done.tasks[&t.name].start_seq);
            }
        }
    }
}

#[test]
fn planted_violations_are_flagged_exactly() {
    let fx = Fixture::new();
    register_pipeline_templates(&fx);
    let templates: BTreeMap<String, WorkflowTemplate> = fx
        .s()
        .workflows
        .list_templates(&fx.alice())
        .unwrap()
        .into_iter()
        .map(|t| (t.template_name.clone(), t))
        .collect();
    let mut rng = StdRng::seed_from_u64(11);
    for _ in 0..300 {
        let n = rng.random_range(2..=12);
        let mut tasks = random_dag(&mut rng, n);
        assert!(validate_dag(&WorkflowSpec::new(tasks.clone()), &templates).is_empty());

        if rng.random_bool(0.5) {
            // back edge from an ancestor to a descendant closes a cycle
            let j = rng.random_range(1..n);
            let i = rng.random_range(0..j);
            tasks[j].dependencies.push(format!("t{i}"));
            tasks[i].dependencies.push(format!("t{j}"));
            let errs = validate_dag(&WorkflowSpec::new(tasks), &templates);
            assert!(!errs.is_empty());
            assert!(
                errs.iter().all(|e| matches!(e, ValidationError::Cycle { .. })),
                "{errs:?}"
            );
            assert!(errs.iter().any(|e| matches!(e, ValidationError::Cycle { tasks }
                if tasks.contains(&format!("t{i}")) && tasks.contains(&format!("t{j}")))));
        } else {
            let mut planted = BTreeSet::new();
            for _ in 0..rng.random_range(1..=3) {
                let k = rng.random_range(0..n);
                let anc = ancestors(&tasks, k);
                let outside: Vec<usize> = (0..n).filter(|x| !anc.contains(x)).collect();
                let r = outside[rng.random_range(0..outside.len())];
                let key = format!("ref{}", planted.len());
                tasks[k]
                    .arguments
                    .insert(key, format!("x{{{{tasks.t{r}.outputs.params.msg}}}}y"));
                planted.insert(ValidationError::DanglingInterpolation {
                    task: format!("t{k}"),
                    reference: format!("t{r}"),
                    param: "msg".into(),
                });
            }
            let errs: BTreeSet<_> = validate_dag(&WorkflowSpec::new(tasks), &templates)
                .into_iter()
                .collect();
            assert_eq!(errs, planted);
        }
    }
}

/// Independent substitution oracle: scan for the literal prefix and suffix.
fn reference_interpolate(expr: &str, outputs: &TaskOutputs) -> Option<String> {
    let mut out = String::new();
    let mut rest = expr;
    while let Some(start) = rest.find("{{tasks.") {
        let after = &rest[start + 8..];
        let parsed = after.find('}').and_then(|end| {
            if !after[end..].starts_with("}}") {
                return None;
            }
            let inner = &after[..end];
            let (task, param) = inner.split_once(".outputs.params.")?;
            let ok = |s: &str| !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
            (ok(task) && ok(param)).then(|| (task, param, end + 2))
        });
        match parsed {
            Some((task, param, len)) => {
                out.push_str(&rest[..start]);
                out.push_str(outputs.get(task)?.get(param)?);
                rest = &after[len..];
            }
            None => {
                out.push_str(&rest[..start + 8]);
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Some(out)
}

#[test]
fn interpolation_matches_reference_oracle() {
    let mut rng = StdRng::seed_from_u64(3);
    let names = ["a", "b-1", "c_2"];
    let params = ["X", "JOB_ID"];
    let mut outputs = TaskOutputs::new();
    for n in names {
        for p in params {
            outputs
                .entry(n.to_string())
                .or_default()
                .insert(p.to_string(), format!("<{n}.{p}>"));
        }
    }
    let pieces = [
        "lit",
        " ",
        "{",
        "}",
        "{{",
        "}}",
        "tasks.",
        ".outputs.params.",
        "é",
        "{{tasks.",
    ];
    for _ in 0..5_000 {
        let mut expr = String::new();
        for _ in 0..rng.random_range(0..8) {
            if rng.random_bool(0.4) {
                let n = names[rng.random_range(0..names.len())];
                let p = if rng.random_bool(0.9) {
                    params[rng.random_range(0..params.len())]
                } else {
                    "MISSING"
                };
                expr.push_str(&format!("{{{{tasks.{n}.outputs.params.{p}}}}}"));
            } else {
                expr.push_str(pieces[rng.random_range(0..pieces.len())]);
            }
        }
        let ours = interpolate(&expr, &outputs).ok();
        assert_eq!(ours, reference_interpolate(&expr, &outputs), "expr {expr:?}");
        if let Some(s) = ours {
            assert_eq!(interpolate(&expr, &outputs).unwrap(), s);
        }
    }
}
