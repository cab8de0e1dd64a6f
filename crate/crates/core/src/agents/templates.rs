use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::{Captures, Regex};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {0} not found")]
    Missing(String),
    #[error("template {template} references unbound placeholder {{{{{name}}}}}")]
    Unbound { template: String, name: String },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

macro_rules! builtin {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../../prompts/", $name, ".txt")))),*]
    };
}

const BUILTIN: &[(&str, &str)] = builtin![
    "testbench_gen/system",
    "testbench_gen/generate",
    "testbench_gen/generate_with_golden",
    "testbench_gen/fix_syntax",
    "rtl_gen/system",
    "rtl_gen/generate",
    "rtl_gen/sample",
    "rtl_gen/vanilla",
    "rtl_gen/fix_syntax",
    "judge/system",
    "judge/evaluate",
    "debug/system",
    "debug/trial",
    "debug/fix_syntax",
    "single/system",
];

/// Prompt texts keyed `<role>/<task>`. Placeholders are written `{{name}}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    texts: BTreeMap<String, String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::builtin()
    }
}

fn placeholder() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}").expect("static regex"))
}

impl PromptTemplates {
    pub fn builtin() -> Self {
        PromptTemplates {
            texts: BUILTIN
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Built-in templates, overridden by any `<role>/<task>.txt` under `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateError> {
        let mut t = Self::builtin();
        let io = |path: &Path, e: std::io::Error| TemplateError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let roles = std::fs::read_dir(dir).map_err(|e| io(dir, e))?;
        for role in roles {
            let role = role.map_err(|e| io(dir, e))?;
            if !role.file_type().map_err(|e| io(&role.path(), e))?.is_dir() {
                continue;
            }
            for file in std::fs::read_dir(role.path()).map_err(|e| io(&role.path(), e))? {
                let path = file.map_err(|e| io(&role.path(), e))?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                    continue;
                }
                let (Some(r), Some(task)) = (
                    role.file_name().to_str().map(str::to_string),
                    path.file_stem().and_then(|s| s.to_str()).map(str::to_string),
                ) else {
                    continue;
                };
                let text = std::fs::read_to_string(&path).map_err(|e| io(&path, e))?;
                t.texts.insert(format!("{r}/{task}"), text);
            }
        }
        Ok(t)
    }

    pub fn set(&mut self, key: impl Into<String>, text: impl Into<String>) {
        self.texts.insert(key.into(), text.into());
    }

    pub fn raw(&self, key: &str) -> Result<&str, TemplateError> {
        self.texts
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| TemplateError::Missing(key.to_string()))
    }

    /// Placeholder names used by a template, in order of first use.
    pub fn placeholders(&self, key: &str) -> Result<Vec<String>, TemplateError> {
        let mut out: Vec<String> = Vec::new();
        for c in placeholder().captures_iter(self.raw(key)?) {
            if !out.iter().any(|n| n == &c[1]) {
                out.push(c[1].to_string());
            }
        }
        Ok(out)
    }

    /// Substitutes every placeholder; values are inserted verbatim and not
    /// scanned again.
    pub fn render(&self, key: &str, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
        let text = self.raw(key)?;
        let mut unbound = None;
        let out = placeholder().replace_all(text, |c: &Captures| {
            match vars.iter().find(|(n, _)| *n == &c[1]) {
                Some((_, v)) => v.to_string(),
                None => {
                    unbound.get_or_insert_with(|| c[1].to_string());
                    String::new()
                }
            }
        });
        match unbound {
            Some(name) => Err(TemplateError::Unbound {
                template: key.to_string(),
                name,
            }),
            None => Ok(out.trim_end().to_string()),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.texts.keys().map(String::as_str)
    }
}
