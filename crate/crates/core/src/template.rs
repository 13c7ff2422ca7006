//! `{{placeholder}}` substitution for plain-text prompt templates.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Renders `template`, replacing every `{{name}}` with `vars[name]`.
///
/// Fails on a placeholder with no value or an unterminated `{{`.
pub fn render(template: &str, vars: &BTreeMap<&str, String>) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| Error::TemplateError("unterminated `{{`".into()))?;
        let name = after[..end].trim();
        let value = vars
            .get(name)
            .ok_or_else(|| Error::TemplateError(format!("unresolved placeholder `{name}`")))?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Placeholder names used by `template`, in order of first appearance.
pub fn placeholders(template: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else { break };
        let name = after[..end].trim().to_string();
        if !out.contains(&name) {
            out.push(name);
        }
        rest = &after[end + 2..];
    }
    out
}

/// A named set of templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub name: String,
    templates: BTreeMap<String, String>,
}

macro_rules! builtin {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../prompts/default/", $name, ".txt")))),*]
    };
}

const DEFAULT_TEMPLATES: &[(&str, &str)] = builtin!(
    "distill",
    "distill_merge",
    "induce",
    "cache",
    "repair",
    "predict_baseline",
    "predict_wo_join",
    "predict_full",
    "intsum",
);

impl TemplateSet {
    /// The built-in set shipped in `prompts/default/`.
    pub fn builtin() -> Self {
        Self {
            name: "default".into(),
            templates: DEFAULT_TEMPLATES
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Loads every `*.txt` in `dir`; missing names fall back to the built-in set.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut set = Self::builtin();
        set.name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("custom")
            .to_string();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for ent in entries {
            let path = ent.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            set.templates.insert(stem.to_string(), text);
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> Result<&str> {
        self.templates
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| Error::TemplateError(format!("no template named `{name}`")))
    }

    pub fn insert(&mut self, name: impl Into<String>, text: impl Into<String>) {
        self.templates.insert(name.into(), text.into());
    }

    pub fn render(&self, name: &str, vars: &BTreeMap<&str, String>) -> Result<String> {
        render(self.get(name)?, vars)
    }
}
