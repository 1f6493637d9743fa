//! Versioned agent prompt templates.
//!
//! Built-in templates ship under `templates/` and are compiled in. A
//! directory may override any of them by providing `<name>.txt`; its
//! `VERSION` file (if any) replaces the version string.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGE_ANALYSIS: &str = "image_analysis";
pub const CLINICAL_CONTEXT: &str = "clinical_context";
pub const DIAGNOSIS: &str = "diagnosis";
pub const QUERY_GENERATION: &str = "query_generation";
pub const EVIDENCE_INTEGRATION: &str = "evidence_integration";
pub const REASONING: &str = "reasoning";
pub const REFLECTION: &str = "reflection";
pub const REANALYSIS: &str = "reanalysis";

const BUILTIN: &[(&str, &str)] = &[
    (IMAGE_ANALYSIS, include_str!("../templates/image_analysis.txt")),
    (CLINICAL_CONTEXT, include_str!("../templates/clinical_context.txt")),
    (DIAGNOSIS, include_str!("../templates/diagnosis.txt")),
    (QUERY_GENERATION, include_str!("../templates/query_generation.txt")),
    (
        EVIDENCE_INTEGRATION,
        include_str!("../templates/evidence_integration.txt"),
    ),
    (REASONING, include_str!("../templates/reasoning.txt")),
    (REFLECTION, include_str!("../templates/reflection.txt")),
    (REANALYSIS, include_str!("../templates/reanalysis.txt")),
];

const BUILTIN_VERSION: &str = include_str!("../templates/VERSION");

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    version: String,
    templates: BTreeMap<String, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self {
            version: format!("builtin-{}", BUILTIN_VERSION.trim()),
            templates: BUILTIN
                .iter()
                .map(|(name, body)| (name.to_string(), body.to_string()))
                .collect(),
        }
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Config(format!(
                "templates directory {} does not exist",
                dir.display()
            )));
        }
        let mut set = Self::builtin();
        let mut overridden = false;
        for (name, _) in BUILTIN {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                set.templates.insert(name.to_string(), body);
                overridden = true;
            }
        }
        let version_path = dir.join("VERSION");
        if version_path.exists() {
            let v = std::fs::read_to_string(&version_path).map_err(|e| Error::io(&version_path, e))?;
            set.version = v.trim().to_string();
        } else if overridden {
            set.version = format!("{}+custom", set.version);
        }
        Ok(set)
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// Fills `{{name}}` placeholders. Every placeholder in the template must
    /// have a value; values are inserted verbatim and never re-scanned.
    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> Result<String> {
        let template = self
            .templates
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown template {name}")))?;
        let mut out = String::with_capacity(template.len() + 256);
        let mut rest = template.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after
                .find("}}")
                .ok_or_else(|| Error::Config(format!("template {name}: unterminated placeholder")))?;
            let key = after[..end].trim();
            let value = vars
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Config(format!("template {name}: no value for {{{{{key}}}}}")))?;
            out.push_str(value);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}
