//! Output-parameter interpolation: `{{tasks.<task>.outputs.params.<param>}}`.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;

static REFERENCE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\{\{tasks\.([A-Za-z0-9_-]+)\.outputs\.params\.([A-Za-z0-9_-]+)\}\}").expect("valid regex")
});

/// Outputs of finished tasks: task name → param name → value.
pub type TaskOutputs = BTreeMap<String, BTreeMap<String, String>>;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamRef {
    pub task: String,
    pub param: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unresolved parameter tasks.{task}.outputs.params.{param}")]
pub struct Unresolved {
    pub task: String,
    pub param: String,
}

/// Every reference in `expr`, in order of appearance.
pub fn references(expr: &str) -> Vec<ParamRef> {
    REFERENCE
        .captures_iter(expr)
        .map(|c| ParamRef {
            task: c[1].to_string(),
            param: c[2].to_string(),
        })
        .collect()
}

/// Replaces each reference with the stored value. Literal text is kept as is
/// and substituted values are never scanned again.
pub fn interpolate(expr: &str, outputs: &TaskOutputs) -> Result<String, Unresolved> {
    let mut out = String::with_capacity(expr.len());
    let mut last = 0;
    for c in REFERENCE.captures_iter(expr) {
        let whole = c.get(0).expect("group 0");
        let (task, param) = (&c[1], &c[2]);
        let value = outputs.get(task).and_then(|p| p.get(param)).ok_or_else(|| Unresolved {
            task: task.to_string(),
            param: param.to_string(),
        })?;
        out.push_str(&expr[last..whole.start()]);
        out.push_str(value);
        last = whole.end();
    }
    out.push_str(&expr[last..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outputs(entries: &[(&str, &str, &str)]) -> TaskOutputs {
        let mut o = TaskOutputs::new();
        for (t, p, v) in entries {
            o.entry(t.to_string()).or_default().insert(p.to_string(), v.to_string());
        }
        o
    }

    #[test]
    fn job_id_reference() {
        let o = outputs(&[("submit-job", "JOB_ID", "0000042")]);
        assert_eq!(
            interpolate("{{tasks.submit-job.outputs.params.JOB_ID}}", &o).unwrap(),
            "0000042"
        );
    }

    #[test]
    fn literal_text_is_identity() {
        assert_eq!(
            interpolate("no placeholders", &TaskOutputs::new()).unwrap(),
            "no placeholders"
        );
        // near-misses are literal
        let s = "{{tasks.a.outputs.param.X}} {{ tasks.a.outputs.params.X }} {tasks.a.outputs.params.X}";
        assert_eq!(interpolate(s, &TaskOutputs::new()).unwrap(), s);
    }

    #[test]
    fn repeated_reference() {
        let o = outputs(&[("a", "X", "7")]);
        assert_eq!(
            interpolate("job={{tasks.a.outputs.params.X}}/{{tasks.a.outputs.params.X}}", &o).unwrap(),
            "job=7/7"
        );
    }

    #[test]
    fn no_recursive_substitution() {
        let o = outputs(&[("a", "X", "{{tasks.b.outputs.params.Y}}"), ("b", "Y", "boom")]);
        assert_eq!(
            interpolate("{{tasks.a.outputs.params.X}}", &o).unwrap(),
            "{{tasks.b.outputs.params.Y}}"
        );
    }

    #[test]
    fn unresolved_reference() {
        let err = interpolate("x{{tasks.a.outputs.params.X}}", &TaskOutputs::new()).unwrap_err();
        assert_eq!(err.to_string(), "unresolved parameter tasks.a.outputs.params.X");
    }

    #[test]
    fn references_in_order() {
        let refs = references("{{tasks.b.outputs.params.P}}-{{tasks.a_1.outputs.params.Q-2}}");
        assert_eq!(
            refs,
            vec![
                ParamRef {
                    task: "b".into(),
                    param: "P".into()
                },
                ParamRef {
                    task: "a_1".into(),
                    param: "Q-2".into()
                }
            ]
        );
    }
}
