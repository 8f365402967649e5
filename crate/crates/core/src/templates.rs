//! Repository of verified launch-script templates.
//!
//! A template body is ordinary shell text with `{name}` placeholders, where
//! `name` is `[a-z][a-z0-9_]*`. Other uses of braces, such as `${VAR}`,
//! `{Print}` or `{ cmd; }`, are shell syntax and pass through untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::kinds::{Framework, Launcher, Strategy};

const BUNDLED_TEMPLATES: &str = include_str!("../data/templates.json");

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template document is malformed at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("template `{template}` is invalid: placeholder `{{{placeholder}}}` is not declared in params")]
    UndeclaredPlaceholder { template: String, placeholder: String },
    #[error("template `{template}` is invalid: required param `{param}` does not appear in the body")]
    UnusedRequiredParam { template: String, param: String },
    #[error("template `{template}` is invalid: {reason}")]
    Invalid { template: String, reason: String },
    #[error("template conflict: `{new}` has the same key {key} as `{existing}`")]
    Conflict {
        key: String,
        existing: String,
        new: String,
    },
}

/// One `{name}` occurrence in a body.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlaceholderSpan<'a> {
    pub name: &'a str,
    /// Byte range of the whole token, braces included.
    pub span: Range<usize>,
}

/// Every placeholder token in `body`, in order of appearance.
pub fn placeholder_spans(body: &str) -> Vec<PlaceholderSpan<'_>> {
    let bytes = body.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'{' || (i > 0 && bytes[i - 1] == b'$') {
            i += 1;
            continue;
        }
        let start = i;
        let mut j = i + 1;
        if j < bytes.len() && bytes[j].is_ascii_lowercase() {
            j += 1;
            while j < bytes.len()
                && (bytes[j].is_ascii_lowercase() || bytes[j].is_ascii_digit() || bytes[j] == b'_')
            {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == b'}' {
                spans.push(PlaceholderSpan {
                    name: &body[start + 1..j],
                    span: start..j + 1,
                });
                i = j + 1;
                continue;
            }
        }
        i = start + 1;
    }
    spans
}

/// Distinct placeholder names in order of first occurrence.
pub fn placeholders(body: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    placeholder_spans(body)
        .into_iter()
        .filter(|p| seen.insert(p.name))
        .map(|p| p.name.to_string())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Integer,
    Port,
    Path,
    Text,
}

/// A typed parameter value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Integer(u64),
    Text(String),
}

impl ParamValue {
    /// Checks that the value fits `kind`.
    pub fn check(&self, kind: ParamKind) -> Result<(), String> {
        match (kind, self) {
            (ParamKind::Integer, ParamValue::Integer(_)) => Ok(()),
            (ParamKind::Port, ParamValue::Integer(p)) if (1024..=65535).contains(p) => Ok(()),
            (ParamKind::Port, ParamValue::Integer(p)) => {
                Err(format!("port {p} is outside 1024..=65535"))
            }
            (ParamKind::Path | ParamKind::Text, ParamValue::Text(_)) => Ok(()),
            (kind, value) => Err(format!("value {value} does not fit kind {kind:?}")),
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Integer(n) => write!(f, "{n}"),
            ParamValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamDecl {
    pub name: String,
    pub kind: ParamKind,
    #[serde(default = "default_true")]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<ParamValue>,
}

fn default_true() -> bool {
    true
}

/// Repository key: one template per (cluster, framework, strategy, launcher).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TemplateKey {
    pub cluster: String,
    pub framework: Framework,
    pub strategy: Strategy,
    pub launcher: Launcher,
}

impl fmt::Display for TemplateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.cluster, self.framework, self.strategy, self.launcher
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub id: String,
    pub cluster: String,
    pub framework: Framework,
    pub strategy: Strategy,
    pub launcher: Launcher,
    pub body: String,
    #[serde(default)]
    pub params: Vec<ParamDecl>,
    #[serde(default)]
    pub verified: bool,
    #[serde(default)]
    pub notes: String,
}

impl Template {
    pub fn key(&self) -> TemplateKey {
        TemplateKey {
            cluster: self.cluster.clone(),
            framework: self.framework,
            strategy: self.strategy,
            launcher: self.launcher,
        }
    }

    pub fn param(&self, name: &str) -> Option<&ParamDecl> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        let invalid = |reason: String| TemplateError::Invalid {
            template: self.id.clone(),
            reason,
        };
        if self.id.trim().is_empty() {
            return Err(invalid("id must be non-empty".into()));
        }
        if self.cluster.trim().is_empty() {
            return Err(invalid("cluster must be non-empty".into()));
        }
        let mut declared = BTreeSet::new();
        for p in &self.params {
            if !declared.insert(p.name.as_str()) {
                return Err(invalid(format!("param `{}` declared twice", p.name)));
            }
            if let Some(default) = &p.default {
                default
                    .check(p.kind)
                    .map_err(|e| invalid(format!("default for `{}`: {e}", p.name)))?;
            }
        }
        let used = placeholders(&self.body);
        if let Some(name) = used.iter().find(|n| !declared.contains(n.as_str())) {
            return Err(TemplateError::UndeclaredPlaceholder {
                template: self.id.clone(),
                placeholder: name.clone(),
            });
        }
        if let Some(p) = self
            .params
            .iter()
            .find(|p| p.required && !used.contains(&p.name))
        {
            return Err(TemplateError::UnusedRequiredParam {
                template: self.id.clone(),
                param: p.name.clone(),
            });
        }
        Ok(())
    }
}

/// Immutable collection of templates, ordered by id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, Template>,
    keys: BTreeMap<TemplateKey, String>,
}

impl TemplateSet {
    pub fn bundled() -> TemplateSet {
        load_repository(BUNDLED_TEMPLATES).expect("bundled template repository is valid")
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Template> {
        self.templates.get(id)
    }

    pub fn by_key(&self, key: &TemplateKey) -> Option<&Template> {
        self.keys.get(key).and_then(|id| self.templates.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Template> {
        self.templates.values()
    }

    /// Returns a new set containing `template`; `self` is left unchanged.
    pub fn add_template(&self, template: Template) -> Result<TemplateSet, TemplateError> {
        let mut next = self.clone();
        next.insert(template)?;
        Ok(next)
    }

    fn insert(&mut self, template: Template) -> Result<(), TemplateError> {
        template.validate()?;
        let key = template.key();
        if let Some(existing) = self.keys.get(&key) {
            return Err(TemplateError::Conflict {
                key: key.to_string(),
                existing: existing.clone(),
                new: template.id.clone(),
            });
        }
        if self.templates.contains_key(&template.id) {
            return Err(TemplateError::Conflict {
                key: format!("id `{}`", template.id),
                existing: template.id.clone(),
                new: template.id.clone(),
            });
        }
        self.keys.insert(key, template.id.clone());
        self.templates.insert(template.id.clone(), template);
        Ok(())
    }

    pub fn merge(&self, other: &TemplateSet) -> Result<TemplateSet, TemplateError> {
        let mut next = self.clone();
        for t in other.iter() {
            next.insert(t.clone())?;
        }
        Ok(next)
    }

    pub fn to_json(&self) -> String {
        let records: Vec<&Template> = self.templates.values().collect();
        serde_json::to_string_pretty(&records).expect("templates serialize")
    }
}

/// Parses and validates a repository document (JSON array of templates).
pub fn load_repository(source: &str) -> Result<TemplateSet, TemplateError> {
    let mut set = TemplateSet::default();
    if source.trim().is_empty() {
        return Ok(set);
    }
    let records: Vec<Template> =
        serde_json::from_str(source).map_err(|e| TemplateError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
    for t in records {
        set.insert(t)?;
    }
    Ok(set)
}
