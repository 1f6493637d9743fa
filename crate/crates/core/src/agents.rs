//! Context-assembly agents: per-image findings, cross-image merging,
//! clinical context extraction, diagnostic hypotheses and weighted evidence
//! integration.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backends::{ChatBackend, ChatRequest, Message};
use crate::dataset::QuestionDefinition;
use crate::error::{Error, Result};
use crate::templates::{TemplateSet, CLINICAL_CONTEXT, DIAGNOSIS, EVIDENCE_INTEGRATION, IMAGE_ANALYSIS};
use crate::text::collapse_whitespace;

/// Parses backend output as a JSON object: strictly first, then from the
/// first balanced `{...}` span in the text.
pub fn parse_structured_response(raw: &str) -> Result<Value> {
    if let Ok(value @ Value::Object(_)) = serde_json::from_str::<Value>(raw.trim()) {
        return Ok(value);
    }
    if let Some(span) = first_brace_span(raw) {
        if let Ok(value @ Value::Object(_)) = serde_json::from_str::<Value>(span) {
            return Ok(value);
        }
    }
    Err(Error::Parse { raw: raw.to_string() })
}

fn first_brace_span(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + offset + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

fn string_list(obj: &Map<String, Value>, key: &str, warnings: &mut Vec<String>) -> Vec<String> {
    let mut out = Vec::new();
    match obj.get(key) {
        None | Some(Value::Null) => {}
        Some(Value::String(s)) => out.extend(s.split([',', ';']).map(collapse_whitespace)),
        Some(Value::Array(items)) => {
            for item in items {
                match item {
                    Value::String(s) => out.push(collapse_whitespace(s)),
                    Value::Number(n) => out.push(n.to_string()),
                    _ => warnings.push(format!("field `{key}` holds a non-text entry; ignored")),
                }
            }
        }
        Some(_) => warnings.push(format!("field `{key}` is not a list; left empty")),
    }
    let mut seen = HashSet::new();
    out.retain(|s| !s.is_empty() && seen.insert(s.to_lowercase()));
    out
}

fn text_field(obj: &Map<String, Value>, key: &str, warnings: &mut Vec<String>) -> String {
    match obj.get(key) {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => collapse_whitespace(s),
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(Value::as_str)
            .map(collapse_whitespace)
            .collect::<Vec<_>>()
            .join("; "),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => {
            warnings.push(format!("field `{key}` is not text; left empty"));
            String::new()
        }
    }
}

fn value_text(value: Option<&Value>) -> String {
    match value {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => collapse_whitespace(s),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| value_text(Some(v)))
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("; "),
        Some(other) => other.to_string(),
    }
}

/// Backend errors keep their attempt trace and gain a note on what failed.
fn annotate(err: Error, note: String) -> Error {
    match err {
        Error::Backend { backend, mut attempts } => {
            attempts.push(note);
            Error::Backend { backend, attempts }
        }
        other => other,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageFindings {
    pub morphology: Vec<String>,
    pub anatomical_locations: Vec<String>,
    pub colors: Vec<String>,
    pub textures: Vec<String>,
    pub distribution: String,
    pub trauma_signs: Vec<String>,
    pub chronicity_cues: Vec<String>,
    pub source_image: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ImageFindings {
    fn from_value(value: &Value, source_image: &str) -> Self {
        let mut warnings = Vec::new();
        let Some(obj) = value.as_object() else {
            return Self {
                source_image: source_image.into(),
                warnings: vec!["image analysis response is not an object".into()],
                ..Self::default()
            };
        };
        let mut findings = Self {
            morphology: string_list(obj, "morphology", &mut warnings),
            anatomical_locations: string_list(obj, "anatomical_locations", &mut warnings),
            colors: string_list(obj, "colors", &mut warnings),
            textures: string_list(obj, "textures", &mut warnings),
            distribution: text_field(obj, "distribution", &mut warnings),
            trauma_signs: string_list(obj, "trauma_signs", &mut warnings),
            chronicity_cues: string_list(obj, "chronicity_cues", &mut warnings),
            source_image: source_image.into(),
            warnings: Vec::new(),
        };
        if findings.is_empty() {
            warnings.push("image analysis returned no findings".into());
        }
        findings.warnings = warnings;
        findings
    }

    pub fn is_empty(&self) -> bool {
        self.morphology.is_empty()
            && self.anatomical_locations.is_empty()
            && self.colors.is_empty()
            && self.textures.is_empty()
            && self.distribution.is_empty()
            && self.trauma_signs.is_empty()
            && self.chronicity_cues.is_empty()
    }
}

/// Describes one image. Unparseable output yields empty findings with a
/// warning; backend failure is an error naming the image.
pub fn analyze_image(
    image_path: &Path,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
    fixture_keys: Vec<String>,
) -> Result<ImageFindings> {
    let source = image_path.display().to_string();
    let name = image_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| source.clone());
    let prompt = templates.render(IMAGE_ANALYSIS, &[("image_name", &name)])?;
    let request = ChatRequest::new(IMAGE_ANALYSIS, vec![Message::user(prompt)])
        .with_keys(fixture_keys)
        .with_images(vec![image_path.to_path_buf()]);
    let raw = backend
        .chat(&request)
        .map_err(|e| annotate(e, format!("image analysis of {source}")))?;
    Ok(match parse_structured_response(&raw) {
        Ok(value) => ImageFindings::from_value(&value, &source),
        Err(_) => {
            log::warn!("unparseable image analysis for {source}");
            ImageFindings {
                source_image: source,
                warnings: vec!["image analysis response could not be parsed".into()],
                ..ImageFindings::default()
            }
        }
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UnifiedFindings {
    pub morphology: Vec<String>,
    pub anatomical_locations: Vec<String>,
    pub colors: Vec<String>,
    pub textures: Vec<String>,
    pub distribution: Vec<String>,
    pub trauma_signs: Vec<String>,
    pub chronicity_cues: Vec<String>,
    pub source_images: Vec<String>,
    /// Field name to a per-image description, for fields that differ.
    pub variation_notes: BTreeMap<String, String>,
}

fn union_of<'a>(lists: impl Iterator<Item = &'a [String]>) -> Vec<String> {
    let mut seen = HashSet::new();
    lists
        .flatten()
        .filter(|s| !s.is_empty() && seen.insert(s.to_lowercase()))
        .cloned()
        .collect()
}

fn variation<'a>(per_image: &'a [ImageFindings], get: impl Fn(&'a ImageFindings) -> Vec<String>) -> Option<String> {
    let sets: Vec<BTreeSet<String>> = per_image
        .iter()
        .map(|f| get(f).iter().map(|s| s.to_lowercase()).collect())
        .collect();
    if sets.windows(2).all(|w| w[0] == w[1]) {
        return None;
    }
    Some(
        per_image
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let values = get(f);
                let shown = if values.is_empty() {
                    "-".to_string()
                } else {
                    values.join(", ")
                };
                format!("image {} ({}): {shown}", i + 1, f.source_image)
            })
            .collect::<Vec<_>>()
            .join("; "),
    )
}

/// Field-wise union across images, keeping first spellings, with notes on
/// every field whose values differ between images.
pub fn aggregate_findings(per_image: &[ImageFindings]) -> Result<UnifiedFindings> {
    if per_image.is_empty() {
        return Err(Error::Precondition(
            "aggregate_findings needs at least one image".into(),
        ));
    }
    let mut unified = UnifiedFindings {
        morphology: union_of(per_image.iter().map(|f| f.morphology.as_slice())),
        anatomical_locations: union_of(per_image.iter().map(|f| f.anatomical_locations.as_slice())),
        colors: union_of(per_image.iter().map(|f| f.colors.as_slice())),
        textures: union_of(per_image.iter().map(|f| f.textures.as_slice())),
        distribution: union_of(per_image.iter().map(|f| std::slice::from_ref(&f.distribution))),
        trauma_signs: union_of(per_image.iter().map(|f| f.trauma_signs.as_slice())),
        chronicity_cues: union_of(per_image.iter().map(|f| f.chronicity_cues.as_slice())),
        source_images: per_image.iter().map(|f| f.source_image.clone()).collect(),
        variation_notes: BTreeMap::new(),
    };
    type FieldGetter = fn(&ImageFindings) -> Vec<String>;
    let fields: [(&str, FieldGetter); 7] = [
        ("morphology", |f| f.morphology.clone()),
        ("anatomical_locations", |f| f.anatomical_locations.clone()),
        ("colors", |f| f.colors.clone()),
        ("textures", |f| f.textures.clone()),
        ("distribution", |f| {
            if f.distribution.is_empty() {
                Vec::new()
            } else {
                vec![f.distribution.clone()]
            }
        }),
        ("trauma_signs", |f| f.trauma_signs.clone()),
        ("chronicity_cues", |f| f.chronicity_cues.clone()),
    ];
    for (name, get) in fields {
        if let Some(note) = variation(per_image, get) {
            unified.variation_notes.insert(name.to_string(), note);
        }
    }
    Ok(unified)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriState {
    Yes,
    No,
    #[default]
    Unmentioned,
}

impl TriState {
    fn parse(value: Option<&Value>) -> Self {
        match value {
            Some(Value::Bool(true)) => TriState::Yes,
            Some(Value::Bool(false)) => TriState::No,
            Some(Value::String(s)) => match s.trim().to_ascii_lowercase().as_str() {
                "yes" | "true" | "present" => TriState::Yes,
                "no" | "false" | "absent" | "denied" => TriState::No,
                _ => TriState::Unmentioned,
            },
            _ => TriState::Unmentioned,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClinicalContext {
    pub demographics: BTreeMap<String, String>,
    pub reported_locations: Vec<String>,
    pub appearance: String,
    pub duration: String,
    pub progression: String,
    pub triggers: Vec<String>,
    pub history: String,
    pub itch: TriState,
    pub pain: TriState,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

const ITCH_TERMS: &[&str] = &["itch", "prurit", "scratch"];
const PAIN_TERMS: &[&str] = &["pain", "hurt", "sore", "tender", "ache", "aching", "sting", "burning"];

fn mentions(text: &str, terms: &[&str]) -> bool {
    let lower = text.to_lowercase();
    terms.iter().any(|t| lower.contains(t))
}

impl ClinicalContext {
    fn from_value(value: &Value, source_text: &str) -> Self {
        let mut warnings = Vec::new();
        let Some(obj) = value.as_object() else {
            return Self {
                warnings: vec!["clinical context response is not an object".into()],
                ..Self::default()
            };
        };
        let demographics = match obj.get("demographics") {
            Some(Value::Object(map)) => map
                .iter()
                .filter_map(|(k, v)| {
                    let text = value_text(Some(v));
                    (!text.is_empty()).then(|| (k.clone(), text))
                })
                .collect(),
            None | Some(Value::Null) => BTreeMap::new(),
            Some(_) => {
                warnings.push("field `demographics` is not an object; left empty".into());
                BTreeMap::new()
            }
        };
        // Symptom flags need explicit wording in the source text.
        let guard = |state: TriState, terms: &[&str], name: &str, warnings: &mut Vec<String>| {
            if state != TriState::Unmentioned && !mentions(source_text, terms) {
                warnings.push(format!("{name} flag has no textual support; reset to unmentioned"));
                TriState::Unmentioned
            } else {
                state
            }
        };
        let itch = guard(TriState::parse(obj.get("itch")), ITCH_TERMS, "itch", &mut warnings);
        let pain = guard(TriState::parse(obj.get("pain")), PAIN_TERMS, "pain", &mut warnings);
        Self {
            demographics,
            reported_locations: string_list(obj, "reported_locations", &mut warnings),
            appearance: text_field(obj, "appearance", &mut warnings),
            duration: text_field(obj, "duration", &mut warnings),
            progression: text_field(obj, "progression", &mut warnings),
            triggers: string_list(obj, "triggers", &mut warnings),
            history: text_field(obj, "history", &mut warnings),
            itch,
            pain,
            warnings,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.demographics.is_empty()
            && self.reported_locations.is_empty()
            && self.appearance.is_empty()
            && self.duration.is_empty()
            && self.progression.is_empty()
            && self.triggers.is_empty()
            && self.history.is_empty()
            && self.itch == TriState::Unmentioned
            && self.pain == TriState::Unmentioned
    }
}

/// Structured clinical context from the patient's own words. Empty input
/// returns the default context without a backend call.
pub fn extract_clinical_context(
    title: &str,
    content: &str,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
    fixture_keys: Vec<String>,
) -> Result<ClinicalContext> {
    let title = collapse_whitespace(title);
    let content = collapse_whitespace(content);
    if title.is_empty() && content.is_empty() {
        return Ok(ClinicalContext::default());
    }
    let prompt = templates.render(CLINICAL_CONTEXT, &[("title", &title), ("content", &content)])?;
    let request = ChatRequest::new(CLINICAL_CONTEXT, vec![Message::user(prompt)]).with_keys(fixture_keys);
    let raw = backend.chat(&request)?;
    let source_text = format!("{title} {content}");
    Ok(match parse_structured_response(&raw) {
        Ok(value) => ClinicalContext::from_value(&value, &source_text),
        Err(_) => {
            log::warn!("unparseable clinical context response");
            ClinicalContext {
                warnings: vec!["clinical context response could not be parsed".into()],
                ..ClinicalContext::default()
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub name: String,
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisHypotheses {
    /// Rank order, most likely first.
    pub ranked: Vec<Hypothesis>,
    /// Set when the backend failed and no hypotheses could be produced.
    pub degraded: bool,
}

impl DiagnosisHypotheses {
    pub fn names(&self) -> Vec<String> {
        self.ranked.iter().map(|h| h.name.clone()).collect()
    }
}

fn parse_hypotheses(value: &Value) -> Vec<Hypothesis> {
    let items = match value.get("diagnoses") {
        Some(Value::Array(items)) => items.as_slice(),
        _ => return Vec::new(),
    };
    let mut seen = HashSet::new();
    items
        .iter()
        .filter_map(|item| match item {
            Value::String(name) => Some(Hypothesis {
                name: collapse_whitespace(name),
                confidence: None,
            }),
            Value::Object(obj) => Some(Hypothesis {
                name: collapse_whitespace(obj.get("name")?.as_str()?),
                confidence: obj
                    .get("confidence")
                    .and_then(Value::as_f64)
                    .filter(|c| c.is_finite())
                    .map(|c| c.clamp(0.0, 1.0)),
            }),
            _ => None,
        })
        .filter(|h| !h.name.is_empty() && seen.insert(h.name.to_lowercase()))
        .collect()
}

/// Ranked diagnostic hypotheses from findings and context. Backend failure
/// yields an empty, degraded result rather than an error.
pub fn extract_diagnoses(
    findings: &UnifiedFindings,
    context: &ClinicalContext,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
    fixture_keys: Vec<String>,
) -> Result<DiagnosisHypotheses> {
    let findings_empty = findings.morphology.is_empty()
        && findings.anatomical_locations.is_empty()
        && findings.colors.is_empty()
        && findings.textures.is_empty()
        && findings.distribution.is_empty()
        && findings.trauma_signs.is_empty()
        && findings.chronicity_cues.is_empty();
    if findings_empty && context.is_empty() {
        return Ok(DiagnosisHypotheses::default());
    }
    let prompt = templates.render(
        DIAGNOSIS,
        &[("findings", &to_json(findings)), ("context", &to_json(context))],
    )?;
    let request = ChatRequest::new(DIAGNOSIS, vec![Message::user(prompt)]).with_keys(fixture_keys);
    match backend.chat(&request) {
        Ok(raw) => Ok(DiagnosisHypotheses {
            ranked: parse_structured_response(&raw)
                .map(|v| parse_hypotheses(&v))
                .unwrap_or_default(),
            degraded: false,
        }),
        Err(e) => {
            log::warn!("diagnosis extraction failed; continuing without hypotheses: {e}");
            Ok(DiagnosisHypotheses {
                ranked: Vec::new(),
                degraded: true,
            })
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("agent records serialize")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceWeights {
    pub visual: f64,
    pub clinical: f64,
    pub knowledge: f64,
}

impl EvidenceWeights {
    pub const UNIFORM: Self = Self {
        visual: 1.0 / 3.0,
        clinical: 1.0 / 3.0,
        knowledge: 1.0 / 3.0,
    };

    pub fn sum(&self) -> f64 {
        self.visual + self.clinical + self.knowledge
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.visual, self.clinical, self.knowledge];
        if parts.iter().any(|w| !w.is_finite() || *w < 0.0)
            || self.sum().partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
        {
            return Err(Error::Config(format!("invalid evidence weights {self:?}")));
        }
        Ok(())
    }

    pub fn normalized(&self) -> Self {
        let total = self.sum();
        Self {
            visual: self.visual / total,
            clinical: self.clinical / total,
            knowledge: self.knowledge / total,
        }
    }
}

/// Per-family source weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightTable(pub BTreeMap<String, EvidenceWeights>);

impl Default for WeightTable {
    fn default() -> Self {
        let visual = EvidenceWeights {
            visual: 0.6,
            clinical: 0.25,
            knowledge: 0.15,
        };
        let clinical = EvidenceWeights {
            visual: 0.25,
            clinical: 0.6,
            knowledge: 0.15,
        };
        let knowledge = EvidenceWeights {
            visual: 0.2,
            clinical: 0.2,
            knowledge: 0.6,
        };
        let mut table = BTreeMap::new();
        for family in ["CQID012", "CQID020", "CQID034", "CQID035", "CQID036"] {
            table.insert(family.to_string(), visual);
        }
        for family in ["CQID015", "CQID025"] {
            table.insert(family.to_string(), clinical);
        }
        for family in ["CQID010", "CQID011"] {
            table.insert(family.to_string(), knowledge);
        }
        Self(table)
    }
}

impl WeightTable {
    pub fn validate(&self) -> Result<()> {
        self.0.values().try_for_each(EvidenceWeights::validate)
    }

    /// Normalized weights for a family; uniform with a warning if absent.
    pub fn weights_for(&self, base_qid: &str) -> EvidenceWeights {
        match self.0.get(base_qid) {
            Some(w) if w.validate().is_ok() => w.normalized(),
            _ => {
                log::warn!("no evidence weights for {base_qid}; using uniform weights");
                EvidenceWeights::UNIFORM
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceBundle {
    pub findings: UnifiedFindings,
    pub context: ClinicalContext,
    /// Empty whenever retrieval was gated off.
    pub passages: Vec<String>,
    pub weights: EvidenceWeights,
    pub concordance_notes: String,
    pub question_family: String,
}

impl EvidenceBundle {
    /// Text form handed to the decision stages.
    pub fn render(&self) -> String {
        let w = &self.weights;
        let mut out = format!(
            "Visual findings (weight {:.2}): {}\nClinical context (weight {:.2}): {}\n",
            w.visual,
            to_json(&self.findings),
            w.clinical,
            to_json(&self.context)
        );
        out.push_str(&format!("Reference passages (weight {:.2}):\n", w.knowledge));
        if self.passages.is_empty() {
            out.push_str("(none)\n");
        }
        for (i, passage) in self.passages.iter().enumerate() {
            out.push_str(&format!("[{}] {}\n", i + 1, passage));
        }
        out.push_str(&format!("Synthesis: {}", self.concordance_notes));
        out
    }
}

/// Applies the family's source weights and asks the backend to reconcile
/// the sources.
#[allow(clippy::too_many_arguments)]
pub fn integrate_evidence(
    findings: &UnifiedFindings,
    context: &ClinicalContext,
    passages: &[String],
    question: &QuestionDefinition,
    weight_table: &WeightTable,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
    fixture_keys: Vec<String>,
) -> Result<EvidenceBundle> {
    let weights = weight_table.weights_for(&question.base_qid);
    let passage_text = if passages.is_empty() {
        "(none)".to_string()
    } else {
        passages
            .iter()
            .enumerate()
            .map(|(i, p)| format!("[{}] {p}", i + 1))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let prompt = templates.render(
        EVIDENCE_INTEGRATION,
        &[
            ("question", &question.question_text),
            ("question_type", &question.question_type),
            ("visual_weight", &format!("{:.2}", weights.visual)),
            ("clinical_weight", &format!("{:.2}", weights.clinical)),
            ("knowledge_weight", &format!("{:.2}", weights.knowledge)),
            ("findings", &to_json(findings)),
            ("context", &to_json(context)),
            ("passages", &passage_text),
        ],
    )?;
    let request = ChatRequest::new(EVIDENCE_INTEGRATION, vec![Message::user(prompt)]).with_keys(fixture_keys);
    let raw = backend.chat(&request)?;
    let concordance_notes = match parse_structured_response(&raw) {
        Ok(value) => ["integrated_findings", "concordance", "weighted_summary"]
            .iter()
            .filter_map(|key| {
                let text = value_text(value.get(*key));
                (!text.is_empty()).then(|| format!("{key}: {text}"))
            })
            .collect::<Vec<_>>()
            .join("\n"),
        Err(_) => {
            log::warn!("unparseable evidence integration; keeping raw text");
            collapse_whitespace(&raw)
        }
    };
    Ok(EvidenceBundle {
        findings: findings.clone(),
        context: context.clone(),
        passages: passages.to_vec(),
        weights,
        concordance_notes,
        question_family: question.base_qid.clone(),
    })
}
