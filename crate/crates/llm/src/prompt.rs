use std::path::Path;

use qshape_core::envs::EnvSchema;

use crate::{LlmError, Result};

pub const PLACEHOLDERS: [&str; 6] = [
    "task_description",
    "state_schema",
    "action_schema",
    "termination_conditions",
    "q_cap",
    "output_schema",
];

pub const OUTPUT_SCHEMA: &str = "Answer with a JSON array and nothing else. Each element must be an object \
of the form {\"state\": <integer>, \"action\": <integer>, \"q\": <number>}.";

pub const FEEDBACK_HEADER: &str = "### Feedback from the operator";

const BUILTIN_V1: &str = include_str!("../templates/general_v1.txt");

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub general_template: String,
    pub task_description: String,
}

impl PromptTemplate {
    /// The template shipped with this crate.
    pub fn builtin(task_description: impl Into<String>) -> Self {
        PromptTemplate {
            general_template: BUILTIN_V1.to_string(),
            task_description: task_description.into(),
        }
    }

    pub fn from_file(path: impl AsRef<Path>, task_description: impl Into<String>) -> Result<Self> {
        let path = path.as_ref();
        let general_template = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Template(format!("{}: {e}", path.display())))?;
        Ok(PromptTemplate {
            general_template,
            task_description: task_description.into(),
        })
    }
}

/// Renders the template. Feedback, when present, is appended under
/// [`FEEDBACK_HEADER`].
pub fn build_prompt(template: &PromptTemplate, schema: &EnvSchema, q_cap: f64, feedback: Option<&str>) -> Result<String> {
    for name in PLACEHOLDERS {
        if !template.general_template.contains(&format!("{{{name}}}")) {
            return Err(LlmError::MissingPlaceholder(name));
        }
    }
    if schema.state_schema.trim().is_empty() || schema.action_schema.trim().is_empty() {
        return Err(LlmError::Template("state and action schemas must be non-empty".into()));
    }
    let cap = format!("{q_cap}");
    let values = [
        template.task_description.as_str(),
        schema.state_schema.as_str(),
        schema.action_schema.as_str(),
        schema.termination_conditions.as_str(),
        cap.as_str(),
        OUTPUT_SCHEMA,
    ];
    // Single left-to-right pass so substituted text is never rescanned.
    let mut out = String::with_capacity(template.general_template.len() * 2);
    let mut rest = template.general_template.as_str();
    'scan: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        for (name, value) in PLACEHOLDERS.iter().zip(values) {
            let token = format!("{{{name}}}");
            if tail.starts_with(&token) {
                out.push_str(value);
                rest = &tail[token.len()..];
                continue 'scan;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);

    if let Some(text) = feedback.map(str::trim).filter(|t| !t.is_empty()) {
        if !out.ends_with('\n') {
            out.push('\n');
        }
        out.push('\n');
        out.push_str(FEEDBACK_HEADER);
        out.push('\n');
        out.push_str(text);
        out.push('\n');
    }
    Ok(out)
}
