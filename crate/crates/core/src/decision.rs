//! Reason, reflect when unsure, re-analyze when the reflection asks for it.

use std::collections::{BTreeMap, HashSet};
use std::time::SystemTime;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agents::{parse_structured_response, EvidenceBundle};
use crate::backends::{ChatBackend, ChatRequest, Message};
use crate::dataset::{clean_answer_text, QuestionDefinition, NOT_MENTIONED};
use crate::error::{Error, Result};
use crate::templates::{TemplateSet, REANALYSIS, REASONING, REFLECTION};
use crate::text::collapse_whitespace;

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.75;
/// Used when the backend gives no usable confidence; low enough to force reflection.
pub const FALLBACK_CONFIDENCE: f64 = 0.5;

/// Model name to the answers that model predicted.
pub type Advisory = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub answers: Vec<String>,
    pub confidence: f64,
    pub rationale: String,
    pub advisory_snapshot: Advisory,
    pub revised: bool,
    #[serde(default)]
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionVerdict {
    pub requires_revision: bool,
    pub critique: String,
    pub adjusted_confidence: Option<f64>,
    pub triggered: bool,
    #[serde(default)]
    pub degraded: bool,
}

impl ReflectionVerdict {
    fn untriggered() -> Self {
        Self {
            requires_revision: false,
            critique: String::new(),
            adjusted_confidence: None,
            triggered: false,
            degraded: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidatedAnswers {
    pub answers: Vec<String>,
    pub warnings: Vec<String>,
}

/// Maps raw answers onto exact option strings, case-insensitively after
/// cleaning. Unmatched answers are dropped. Never returns an empty list
/// when `options` is non-empty.
pub fn validate_answers(raw_answers: &[String], options: &[String]) -> ValidatedAnswers {
    let mut out = ValidatedAnswers::default();
    let mut seen = HashSet::new();
    for raw in raw_answers {
        let cleaned = clean_answer_text(raw).to_lowercase();
        if cleaned.is_empty() {
            continue;
        }
        match options.iter().find(|o| o.to_lowercase() == cleaned) {
            Some(option) => {
                if seen.insert(option.clone()) {
                    out.answers.push(option.clone());
                }
            }
            None => out.warnings.push(format!("answer {raw:?} is not an option; dropped")),
        }
    }
    // A real answer alongside "Not mentioned" wins.
    if out.answers.len() > 1 {
        out.answers.retain(|a| a != NOT_MENTIONED);
    }
    if out.answers.is_empty() {
        if options.iter().any(|o| o == NOT_MENTIONED) {
            out.answers.push(NOT_MENTIONED.to_string());
        } else if let Some(first) = options.first() {
            out.warnings
                .push(format!("no valid answer; defaulting to first option {first:?}"));
            out.answers.push(first.clone());
        }
    }
    for w in &out.warnings {
        log::warn!("{w}");
    }
    out
}

fn raw_answers(value: &Value, options: &[String]) -> Vec<String> {
    match value.get("answers").or_else(|| value.get("answer")) {
        Some(Value::Array(items)) => items.iter().filter_map(Value::as_str).map(String::from).collect(),
        Some(Value::String(s)) => {
            let whole = clean_answer_text(s).to_lowercase();
            if options.iter().any(|o| o.to_lowercase() == whole) {
                vec![s.clone()]
            } else {
                s.split([',', ';']).map(String::from).collect()
            }
        }
        _ => Vec::new(),
    }
}

fn parse_confidence(value: Option<&Value>, warnings: &mut Vec<String>) -> f64 {
    let parsed = match value {
        Some(Value::Number(n)) => n.as_f64(),
        Some(Value::String(s)) => s.trim().parse::<f64>().ok(),
        _ => None,
    };
    match parsed {
        Some(c) if (0.0..=1.0).contains(&c) => c,
        _ => {
            let msg = format!("missing or invalid confidence {value:?}; using {FALLBACK_CONFIDENCE}");
            log::warn!("{msg}");
            warnings.push(msg);
            FALLBACK_CONFIDENCE
        }
    }
}

fn render_advisory(advisory: &Advisory) -> String {
    if advisory.is_empty() {
        return "(none)".to_string();
    }
    advisory
        .iter()
        .map(|(model, answers)| format!("- {model}: {}", answers.join(", ")))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Builds a decision from a backend reply. Parse failures leave the
/// answer list empty so validation picks the fallback.
fn decision_from_reply(raw: &str, question: &QuestionDefinition, max_answers: usize, advisory: &Advisory) -> Decision {
    let mut warnings = Vec::new();
    let value = match parse_structured_response(raw) {
        Ok(v) => v,
        Err(_) => {
            warnings.push("decision response could not be parsed".to_string());
            Value::Null
        }
    };
    let mut confidence = parse_confidence(value.get("confidence"), &mut warnings);
    let mut validated = validate_answers(&raw_answers(&value, &question.options), &question.options);
    warnings.append(&mut validated.warnings);
    let mut answers = validated.answers;
    answers.truncate(max_answers.max(1));
    if question.options.len() == 1 {
        answers = question.options.clone();
        confidence = 1.0;
    }
    Decision {
        answers,
        confidence,
        rationale: value
            .get("rationale")
            .and_then(Value::as_str)
            .map(collapse_whitespace)
            .unwrap_or_default(),
        advisory_snapshot: advisory.clone(),
        revised: false,
        degraded: false,
        warnings,
    }
}

/// Provisional decision. Advisory predictions are framed as fallible
/// signals in the prompt.
pub fn reason(
    question: &QuestionDefinition,
    max_answers: usize,
    evidence: &EvidenceBundle,
    advisory: &Advisory,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
    fixture_keys: Vec<String>,
) -> Result<Decision> {
    if question.options.is_empty() {
        return Err(Error::Precondition(format!("{} has no options", question.qid)));
    }
    let w = &evidence.weights;
    let prompt = templates.render(
        REASONING,
        &[
            ("question", &question.question_text),
            ("question_type", &question.question_type),
            ("options", &question.options.join(", ")),
            ("max_answers", &max_answers.to_string()),
            ("visual_weight", &format!("{:.2}", w.visual)),
            ("clinical_weight", &format!("{:.2}", w.clinical)),
            ("knowledge_weight", &format!("{:.2}", w.knowledge)),
            ("evidence", &evidence.render()),
            ("advisory", &render_advisory(advisory)),
        ],
    )?;
    let request = ChatRequest::new(REASONING, vec![Message::user(prompt)]).with_keys(fixture_keys);
    let raw = backend.chat(&request)?;
    Ok(decision_from_reply(&raw, question, max_answers, advisory))
}

/// Reviews a decision whose confidence is strictly below `threshold`.
/// Confident decisions pass without a backend call; a failed review keeps
/// the original decision.
#[allow(clippy::too_many_arguments)]
pub fn reflect(
    decision: &Decision,
    question: &QuestionDefinition,
    evidence: &EvidenceBundle,
    advisory: &Advisory,
    threshold: f64,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
    fixture_keys: Vec<String>,
) -> Result<ReflectionVerdict> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Precondition(format!(
            "threshold must be in (0, 1], got {threshold}"
        )));
    }
    if decision.confidence >= threshold {
        return Ok(ReflectionVerdict::untriggered());
    }
    let prompt = templates.render(
        REFLECTION,
        &[
            ("question", &question.question_text),
            ("options", &question.options.join(", ")),
            ("evidence", &evidence.render()),
            ("advisory", &render_advisory(advisory)),
            ("answers", &decision.answers.join(", ")),
            ("confidence", &format!("{:.2}", decision.confidence)),
            ("rationale", &decision.rationale),
        ],
    )?;
    let request = ChatRequest::new(REFLECTION, vec![Message::user(prompt)]).with_keys(fixture_keys);
    let raw = match backend.chat(&request) {
        Ok(raw) => raw,
        Err(e) => {
            log::warn!("reflection failed; keeping the original decision: {e}");
            return Ok(ReflectionVerdict {
                triggered: true,
                degraded: true,
                ..ReflectionVerdict::untriggered()
            });
        }
    };
    let value = parse_structured_response(&raw).unwrap_or(Value::Null);
    let requires_revision = match value.get("requires_revision") {
        Some(Value::Bool(b)) => *b,
        Some(Value::String(s)) => s.trim().eq_ignore_ascii_case("true"),
        _ => false,
    };
    Ok(ReflectionVerdict {
        requires_revision,
        critique: value
            .get("critique")
            .and_then(Value::as_str)
            .map(collapse_whitespace)
            .unwrap_or_default(),
        adjusted_confidence: value
            .get("adjusted_confidence")
            .and_then(Value::as_f64)
            .filter(|c| (0.0..=1.0).contains(c)),
        triggered: true,
        degraded: false,
    })
}

/// Second look guided by the critique. Always marks the result revised;
/// on backend failure the prior decision comes back flagged as degraded.
#[allow(clippy::too_many_arguments)]
pub fn reanalyze(
    question: &QuestionDefinition,
    max_answers: usize,
    evidence: &EvidenceBundle,
    prior: &Decision,
    critique: &str,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
    fixture_keys: Vec<String>,
) -> Result<Decision> {
    let prompt = templates.render(
        REANALYSIS,
        &[
            ("question", &question.question_text),
            ("options", &question.options.join(", ")),
            ("max_answers", &max_answers.to_string()),
            ("evidence", &evidence.render()),
            ("answers", &prior.answers.join(", ")),
            ("rationale", &prior.rationale),
            ("critique", critique),
        ],
    )?;
    let request = ChatRequest::new(REANALYSIS, vec![Message::user(prompt)]).with_keys(fixture_keys);
    let raw = match backend.chat(&request) {
        Ok(raw) => raw,
        Err(e) => {
            log::warn!("re-analysis failed; keeping the prior decision: {e}");
            return Ok(Decision {
                degraded: true,
                ..prior.clone()
            });
        }
    };
    let mut decision = decision_from_reply(&raw, question, max_answers, &prior.advisory_snapshot);
    decision.revised = true;
    let critique = collapse_whitespace(critique);
    if !critique.is_empty() && !decision.rationale.contains(&critique) {
        decision.rationale = if decision.rationale.is_empty() {
            format!("Addresses critique: {critique}")
        } else {
            format!("{} (addresses critique: {critique})", decision.rationale)
        };
    }
    Ok(decision)
}

/// Source of trace timestamps. Fixed clocks keep traces byte-stable.
#[derive(Debug, Clone, PartialEq)]
pub enum Clock {
    System,
    Fixed(String),
}

impl Clock {
    pub fn now(&self) -> String {
        match self {
            Clock::System => humantime::format_rfc3339_millis(SystemTime::now()).to_string(),
            Clock::Fixed(stamp) => stamp.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub encounter_id: String,
    pub base_qid: String,
    pub stage: String,
    pub payload: Value,
    pub timestamp: String,
}

/// Where one loop instance runs and how it is recorded.
#[derive(Debug, Clone)]
pub struct LoopContext<'a> {
    pub encounter_id: &'a str,
    pub fixture_keys: Vec<String>,
    pub clock: &'a Clock,
    pub templates: &'a TemplateSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    pub decision: Decision,
    pub verdict: ReflectionVerdict,
    pub traces: Vec<TraceRecord>,
    pub backend_calls: usize,
}

/// reason, then reflect, then re-analyze at most once.
pub fn run_decision_loop(
    question: &QuestionDefinition,
    max_answers: usize,
    evidence: &EvidenceBundle,
    advisory: &Advisory,
    threshold: f64,
    backend: &dyn ChatBackend,
    ctx: &LoopContext<'_>,
) -> Result<LoopOutcome> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Precondition(format!(
            "threshold must be in (0, 1], got {threshold}"
        )));
    }
    let trace = |stage: &str, payload: Value| TraceRecord {
        encounter_id: ctx.encounter_id.to_string(),
        base_qid: question.base_qid.clone(),
        stage: stage.to_string(),
        payload,
        timestamp: ctx.clock.now(),
    };
    let keys = || ctx.fixture_keys.clone();
    let mut traces = Vec::new();

    let first = reason(
        question,
        max_answers,
        evidence,
        advisory,
        backend,
        ctx.templates,
        keys(),
    )?;
    let mut calls = 1;
    traces.push(trace(REASONING, json!(first)));

    let verdict = reflect(
        &first,
        question,
        evidence,
        advisory,
        threshold,
        backend,
        ctx.templates,
        keys(),
    )?;
    if verdict.triggered {
        calls += 1;
    }
    traces.push(trace(REFLECTION, json!({"threshold": threshold, "verdict": verdict})));

    let decision = if verdict.requires_revision {
        calls += 1;
        let revised = reanalyze(
            question,
            max_answers,
            evidence,
            &first,
            &verdict.critique,
            backend,
            ctx.templates,
            keys(),
        )?;
        traces.push(trace(REANALYSIS, json!(revised)));
        revised
    } else {
        first
    };
    Ok(LoopOutcome {
        decision,
        verdict,
        traces,
        backend_calls: calls,
    })
}
