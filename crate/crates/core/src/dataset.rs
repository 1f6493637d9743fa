//! Challenge input parsing, answer canonicalization, prompt synthesis and
//! per-image sample construction.
//!
//! Accepted input schemas (all files are UTF-8 JSON arrays of objects):
//!
//! * question definitions: `qid`, `question_en` (or `question`), `options_en`
//!   (or `options`), `question_type_en` (or `question_type`),
//!   `question_category_en` (or `question_category`).
//! * encounters (`[split].json`): `encounter_id`, `image_ids`,
//!   `query_title_en` (or `query_title`), `query_content_en` (or
//!   `query_content`).
//! * annotations (`[split]_cvqa.json`): `encounter_id` plus one key per qid
//!   whose value is an option index or a list of option indices.
//!
//! Any missing or mistyped field fails with [`Error::Format`] naming it.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::text::collapse_whitespace;

/// The dataset's explicit null label.
pub const NOT_MENTIONED: &str = "Not mentioned";

/// Default number of samples per serialized batch file.
pub const DEFAULT_BATCH_SIZE: usize = 100;

/// The nine closed-ended question families of the challenge.
pub const KNOWN_FAMILIES: [&str; 9] = [
    "CQID010", "CQID011", "CQID012", "CQID015", "CQID020", "CQID025", "CQID034", "CQID035", "CQID036",
];

const INSTRUCTIONAL_PHRASES: &[&str] = &["Please specify which affected area for each selection."];

const PLEASE_SPECIFY: &str = "(please specify)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionDefinition {
    pub qid: String,
    pub base_qid: String,
    pub slot_index: usize,
    pub question_text: String,
    /// Option strings after [`clean_answer_text`].
    pub options: Vec<String>,
    pub question_type: String,
    pub question_category: String,
    pub max_answers: usize,
}

impl QuestionDefinition {
    pub fn option_index(&self, answer: &str) -> Option<usize> {
        self.options.iter().position(|o| o == answer)
    }

    pub fn not_mentioned_index(&self) -> Option<usize> {
        self.option_index(NOT_MENTIONED)
    }
}

/// All slots sharing one base qid, in slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionFamily {
    pub base_qid: String,
    pub slots: Vec<QuestionDefinition>,
}

impl QuestionFamily {
    pub fn lead(&self) -> &QuestionDefinition {
        &self.slots[0]
    }

    pub fn options(&self) -> &[String] {
        &self.lead().options
    }

    pub fn max_answers(&self) -> usize {
        self.slots.len()
    }

    pub fn slot_qids(&self) -> Vec<String> {
        self.slots.iter().map(|s| s.qid.clone()).collect()
    }

    pub fn is_multilabel(&self) -> bool {
        self.max_answers() > 1
    }
}

/// Validated collection of question definitions indexed by qid and family.
#[derive(Debug, Clone, Default)]
pub struct QuestionCatalog {
    families: BTreeMap<String, QuestionFamily>,
    qid_to_family: BTreeMap<String, String>,
}

impl QuestionCatalog {
    /// Groups definitions into families and checks that slots of a family
    /// agree on options, type, category and answer limit.
    pub fn new(definitions: Vec<QuestionDefinition>) -> Result<Self> {
        let mut families: BTreeMap<String, QuestionFamily> = BTreeMap::new();
        let mut qid_to_family = BTreeMap::new();
        for def in definitions {
            if qid_to_family.insert(def.qid.clone(), def.base_qid.clone()).is_some() {
                return Err(Error::Integrity(format!("duplicate qid {}", def.qid)));
            }
            families
                .entry(def.base_qid.clone())
                .or_insert_with(|| QuestionFamily {
                    base_qid: def.base_qid.clone(),
                    slots: Vec::new(),
                })
                .slots
                .push(def);
        }
        for family in families.values() {
            let lead = family.lead();
            for slot in &family.slots[1..] {
                if slot.options != lead.options
                    || slot.question_type != lead.question_type
                    || slot.question_category != lead.question_category
                    || slot.max_answers != lead.max_answers
                {
                    return Err(Error::Integrity(format!(
                        "slot {} disagrees with {} on options or metadata",
                        slot.qid, lead.qid
                    )));
                }
            }
            if lead.max_answers != family.slots.len() {
                return Err(Error::Integrity(format!(
                    "family {} has {} slots but max_answers {}",
                    family.base_qid,
                    family.slots.len(),
                    lead.max_answers
                )));
            }
        }
        Ok(Self {
            families,
            qid_to_family,
        })
    }

    pub fn families(&self) -> impl Iterator<Item = &QuestionFamily> {
        self.families.values()
    }

    pub fn family(&self, base_qid: &str) -> Option<&QuestionFamily> {
        self.families.get(base_qid)
    }

    pub fn family_of_qid(&self, qid: &str) -> Option<&QuestionFamily> {
        self.qid_to_family.get(qid).and_then(|base| self.families.get(base))
    }

    pub fn definition(&self, qid: &str) -> Option<&QuestionDefinition> {
        self.family_of_qid(qid)
            .and_then(|f| f.slots.iter().find(|s| s.qid == qid))
    }

    pub fn base_qids(&self) -> Vec<String> {
        self.families.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.families.len()
    }

    pub fn is_empty(&self) -> bool {
        self.families.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncounterRecord {
    pub encounter_id: String,
    pub query_title: String,
    pub query_content: String,
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub encounter_id: String,
    pub answers: BTreeMap<String, Vec<usize>>,
}

/// One image-question pair ready for model inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub encounter_id: String,
    pub base_qid: String,
    pub query_text: String,
    pub image_path: String,
    pub answer_text: Option<String>,
    pub question_type: String,
    pub question_category: String,
    pub is_multilabel: bool,
}

/// Samples plus the non-fatal issues found while building them.
#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub warnings: Vec<String>,
}

fn read_json_array(path: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), "<root>", e.to_string()))?;
    match value {
        Value::Array(items) => Ok(items),
        _ => Err(Error::format(
            path.display().to_string(),
            "<root>",
            "expected a JSON array",
        )),
    }
}

struct Fields<'a> {
    source: &'a str,
    index: usize,
    obj: &'a serde_json::Map<String, Value>,
}

impl<'a> Fields<'a> {
    fn new(source: &'a str, index: usize, value: &'a Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::format(source, format!("[{index}]"), "entry is not a JSON object"))?;
        Ok(Self { source, index, obj })
    }

    fn lookup(&self, names: &[&str]) -> Option<&'a Value> {
        names.iter().find_map(|n| self.obj.get(*n))
    }

    fn error(&self, field: &str, message: &str) -> Error {
        Error::format(self.source, field, format!("{message} (entry {})", self.index))
    }

    fn string(&self, names: &[&str]) -> Result<String> {
        match self.lookup(names) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(Value::Null) | None => Err(self.error(names[0], "missing")),
            Some(_) => Err(self.error(names[0], "expected a string")),
        }
    }

    /// Like [`Fields::string`] but tolerates absence and null.
    fn optional_string(&self, names: &[&str]) -> Result<String> {
        match self.lookup(names) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(Value::Null) | None => Ok(String::new()),
            Some(_) => Err(self.error(names[0], "expected a string")),
        }
    }

    fn string_list(&self, names: &[&str]) -> Result<Vec<String>> {
        match self.lookup(names) {
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| {
                    v.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| self.error(names[0], "expected a list of strings"))
                })
                .collect(),
            None => Err(self.error(names[0], "missing")),
            Some(_) => Err(self.error(names[0], "expected a list of strings")),
        }
    }
}

/// Base qid is the part of the qid before the first hyphen.
pub fn base_qid_of(qid: &str) -> &str {
    qid.split_once('-').map_or(qid, |(base, _)| base)
}

/// Loads the question definitions file. Slot indices follow file order
/// within each family; `max_answers` is the family's slot count.
pub fn load_question_definitions(path: &Path) -> Result<Vec<QuestionDefinition>> {
    let source = path.display().to_string();
    let entries = read_json_array(path)?;
    let mut seen = HashSet::new();
    let mut definitions: Vec<QuestionDefinition> = Vec::with_capacity(entries.len());
    for (index, entry) in entries.iter().enumerate() {
        let fields = Fields::new(&source, index, entry)?;
        let qid = fields.string(&["qid"])?;
        if !seen.insert(qid.clone()) {
            return Err(Error::Integrity(format!("duplicate qid {qid} in {source}")));
        }
        let raw_options = fields.string_list(&["options_en", "options"])?;
        if raw_options.is_empty() {
            return Err(fields.error("options_en", "option list is empty"));
        }
        let options: Vec<String> = raw_options.iter().map(|o| clean_answer_text(o)).collect();
        let distinct: HashSet<&String> = options.iter().collect();
        if distinct.len() != options.len() {
            return Err(Error::Integrity(format!(
                "qid {qid} has duplicate options after cleaning"
            )));
        }
        definitions.push(QuestionDefinition {
            base_qid: base_qid_of(&qid).to_string(),
            qid,
            slot_index: 0,
            question_text: clean_question_text(&fields.string(&["question_en", "question"])?),
            options,
            question_type: fields.string(&["question_type_en", "question_type"])?,
            question_category: fields.string(&["question_category_en", "question_category"])?,
            max_answers: 0,
        });
    }

    let mut slot_counts: BTreeMap<String, usize> = BTreeMap::new();
    for def in &mut definitions {
        let count = slot_counts.entry(def.base_qid.clone()).or_default();
        def.slot_index = *count;
        *count += 1;
    }
    for def in &mut definitions {
        def.max_answers = slot_counts[&def.base_qid];
    }
    Ok(definitions)
}

/// Loads `[split].json`. Image ids are resolved against `image_root` when
/// given; otherwise they are kept verbatim.
pub fn load_encounters(path: &Path, image_root: Option<&Path>) -> Result<Vec<EncounterRecord>> {
    let source = path.display().to_string();
    let mut seen = HashSet::new();
    let mut encounters = Vec::new();
    for (index, entry) in read_json_array(path)?.iter().enumerate() {
        let fields = Fields::new(&source, index, entry)?;
        let encounter_id = fields.string(&["encounter_id"])?;
        if !seen.insert(encounter_id.clone()) {
            return Err(Error::Integrity(format!(
                "duplicate encounter_id {encounter_id} in {source}"
            )));
        }
        let image_ids = fields
            .string_list(&["image_ids"])?
            .into_iter()
            .map(|id| match image_root {
                Some(root) => root.join(&id).display().to_string(),
                None => id,
            })
            .collect();
        encounters.push(EncounterRecord {
            encounter_id,
            query_title: fields.optional_string(&["query_title_en", "query_title"])?,
            query_content: fields.optional_string(&["query_content_en", "query_content"])?,
            image_ids,
        });
    }
    Ok(encounters)
}

fn index_value(fields: &Fields<'_>, key: &str, value: &Value) -> Result<Vec<usize>> {
    let as_index = |v: &Value| {
        v.as_u64()
            .map(|i| i as usize)
            .ok_or_else(|| fields.error(key, "expected a non-negative integer index"))
    };
    match value {
        Value::Array(items) => items.iter().map(as_index).collect(),
        other => Ok(vec![as_index(other)?]),
    }
}

/// Loads `[split]_cvqa.json` (also the submission layout).
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let source = path.display().to_string();
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (index, entry) in read_json_array(path)?.iter().enumerate() {
        let fields = Fields::new(&source, index, entry)?;
        let encounter_id = fields.string(&["encounter_id"])?;
        if !seen.insert(encounter_id.clone()) {
            return Err(Error::Integrity(format!(
                "duplicate annotation for {encounter_id} in {source}"
            )));
        }
        let mut answers = BTreeMap::new();
        for (key, value) in fields.obj {
            if key == "encounter_id" {
                continue;
            }
            answers.insert(key.clone(), index_value(&fields, key, value)?);
        }
        records.push(AnnotationRecord { encounter_id, answers });
    }
    Ok(records)
}

fn strip_please_specify(text: &str) -> String {
    let mut out = text.to_string();
    while let Some(pos) = out.to_ascii_lowercase().find(PLEASE_SPECIFY) {
        out.replace_range(pos..pos + PLEASE_SPECIFY.len(), " ");
    }
    out
}

/// Removes brackets, quotation marks and "(please specify)" markers, then
/// trims and collapses interior whitespace. Idempotent.
pub fn clean_answer_text(raw: &str) -> String {
    let mut current = raw.to_string();
    loop {
        let stripped: String = current
            .chars()
            .filter(|c| {
                !matches!(
                    c,
                    '[' | ']' | '\'' | '"' | '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}'
                )
            })
            .collect();
        let next = collapse_whitespace(&strip_please_specify(&collapse_whitespace(&stripped)));
        if next == current {
            return next;
        }
        current = next;
    }
}

fn strip_numeric_prefix(text: &str) -> &str {
    let digits = text.chars().take_while(char::is_ascii_digit).count();
    if digits == 0 {
        return text;
    }
    let rest = &text[digits..];
    match rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
        Some(after) if after.starts_with(char::is_whitespace) || after.is_empty() => after.trim_start(),
        _ => text,
    }
}

/// Question text with leading "N. " / "N) " numbering and known
/// instructional sentences removed.
pub fn clean_question_text(raw: &str) -> String {
    let mut text = collapse_whitespace(raw);
    text = strip_numeric_prefix(&text).to_string();
    for phrase in INSTRUCTIONAL_PHRASES {
        text = text.replace(phrase, " ");
    }
    collapse_whitespace(&text)
}

/// Merges per-slot answers of one family into the canonical gold string.
///
/// "Not mentioned" survives only when every slot holds exactly that label;
/// otherwise it is dropped and the remaining answers are deduplicated in
/// first-occurrence order and joined with ", ". An empty slot list yields
/// an empty string.
pub fn canonicalize_family_answers(per_slot_answers: &[Vec<String>]) -> String {
    if per_slot_answers.is_empty() {
        return String::new();
    }
    let only_not_mentioned = per_slot_answers
        .iter()
        .all(|slot| !slot.is_empty() && slot.iter().all(|a| a == NOT_MENTIONED));
    if only_not_mentioned {
        return NOT_MENTIONED.to_string();
    }
    let mut seen = HashSet::new();
    per_slot_answers
        .iter()
        .flatten()
        .filter(|a| a.as_str() != NOT_MENTIONED && !a.is_empty())
        .filter(|a| seen.insert(a.as_str()))
        .cloned()
        .collect::<Vec<_>>()
        .join(", ")
}

/// Clinical background built from the encounter's title and narrative.
pub fn clinical_background(encounter: &EncounterRecord) -> String {
    let title = collapse_whitespace(&encounter.query_title);
    let content = collapse_whitespace(&encounter.query_content);
    match (title.is_empty(), content.is_empty()) {
        (true, true) => String::new(),
        (false, true) => title,
        (true, false) => content,
        (false, false) => {
            let joiner = if title.ends_with(['.', '?', '!']) { " " } else { ". " };
            format!("{title}{joiner}{content}")
        }
    }
}

/// Builds the constrained inference prompt for one question and encounter.
pub fn synthesize_prompt(question: &QuestionDefinition, encounter: &EncounterRecord) -> String {
    let mut prompt = String::new();
    prompt.push_str(&format!("Question: {}\n", question.question_text));
    prompt.push_str(&format!(
        "Question type: {} | Category: {}\n",
        question.question_type, question.question_category
    ));
    prompt.push_str(&format!("Clinical background: {}\n", clinical_background(encounter)));
    prompt.push_str(&format!("Options: {}\n", question.options.join(", ")));
    prompt.push_str(
        "Instructions: Reply with option text copied exactly from the Options list and nothing else. \
         If several options apply, separate them with commas.",
    );
    if question.not_mentioned_index().is_some() {
        prompt.push_str(&format!(" Reply \"{NOT_MENTIONED}\" if the case does not show it."));
    }
    prompt
}

fn gold_answer(family: &QuestionFamily, annotation: &AnnotationRecord) -> Option<String> {
    let mut any = false;
    let per_slot: Vec<Vec<String>> = family
        .slots
        .iter()
        .map(|slot| match annotation.answers.get(&slot.qid) {
            Some(indices) => {
                any = true;
                indices.iter().map(|&i| slot.options[i].clone()).collect()
            }
            None => Vec::new(),
        })
        .collect();
    any.then(|| canonicalize_family_answers(&per_slot))
}

fn check_annotations(
    annotations: &[AnnotationRecord],
    encounters: &[EncounterRecord],
    catalog: &QuestionCatalog,
) -> Result<()> {
    let known: HashSet<&str> = encounters.iter().map(|e| e.encounter_id.as_str()).collect();
    let mut unknown_qids = BTreeSet::new();
    for record in annotations {
        if !known.contains(record.encounter_id.as_str()) {
            return Err(Error::Integrity(format!(
                "annotation references unknown encounter {}",
                record.encounter_id
            )));
        }
        for (qid, indices) in &record.answers {
            let Some(def) = catalog.definition(qid) else {
                unknown_qids.insert(qid.clone());
                continue;
            };
            if let Some(&bad) = indices.iter().find(|&&i| i >= def.options.len()) {
                return Err(Error::Integrity(format!(
                    "{}: index {bad} out of range for {qid} ({} options)",
                    record.encounter_id,
                    def.options.len()
                )));
            }
        }
    }
    if unknown_qids.is_empty() {
        Ok(())
    } else {
        Err(Error::Integrity(format!(
            "annotations reference unknown qid(s): {}",
            unknown_qids.into_iter().collect::<Vec<_>>().join(", ")
        )))
    }
}

/// Emits one sample per (encounter, family, image), in encounter order,
/// then family order, then image order.
pub fn build_samples(
    encounters: &[EncounterRecord],
    annotations: Option<&[AnnotationRecord]>,
    catalog: &QuestionCatalog,
) -> Result<SampleSet> {
    if let Some(annotations) = annotations {
        check_annotations(annotations, encounters, catalog)?;
    }
    let by_encounter: BTreeMap<&str, &AnnotationRecord> = annotations
        .unwrap_or_default()
        .iter()
        .map(|a| (a.encounter_id.as_str(), a))
        .collect();

    let mut set = SampleSet::default();
    for encounter in encounters {
        if encounter.image_ids.is_empty() {
            let msg = format!("{} has no valid images; skipped", encounter.encounter_id);
            log::warn!("{msg}");
            set.warnings.push(msg);
            continue;
        }
        for family in catalog.families() {
            let lead = family.lead();
            let prompt = synthesize_prompt(lead, encounter);
            let answer_text = by_encounter
                .get(encounter.encounter_id.as_str())
                .and_then(|a| gold_answer(family, a));
            for image in &encounter.image_ids {
                set.samples.push(Sample {
                    encounter_id: encounter.encounter_id.clone(),
                    base_qid: family.base_qid.clone(),
                    query_text: prompt.clone(),
                    image_path: image.clone(),
                    answer_text: answer_text.clone(),
                    question_type: lead.question_type.clone(),
                    question_category: lead.question_category.clone(),
                    is_multilabel: family.is_multilabel(),
                });
            }
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    Jpeg,
    Png,
    Gif,
    Bmp,
    Webp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    Missing,
    Empty,
    CorruptHeader,
    Unreadable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageValidity {
    Valid(ImageFormat),
    Invalid(InvalidReason),
}

impl ImageValidity {
    pub fn is_valid(&self) -> bool {
        matches!(self, ImageValidity::Valid(_))
    }
}

fn sniff_format(header: &[u8]) -> Option<ImageFormat> {
    match header {
        [0xFF, 0xD8, 0xFF, ..] => Some(ImageFormat::Jpeg),
        [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A, ..] => Some(ImageFormat::Png),
        [b'G', b'I', b'F', b'8', ..] => Some(ImageFormat::Gif),
        [b'B', b'M', ..] => Some(ImageFormat::Bmp),
        [b'R', b'I', b'F', b'F', _, _, _, _, b'W', b'E', b'B', b'P', ..] => Some(ImageFormat::Webp),
        _ => None,
    }
}

/// Checks existence, non-emptiness and the raster magic header. No decode.
pub fn validate_image(path: &Path) -> ImageValidity {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return ImageValidity::Invalid(InvalidReason::Missing),
        Err(e) => return ImageValidity::Invalid(InvalidReason::Unreadable(e.to_string())),
    };
    let mut header = Vec::with_capacity(12);
    if let Err(e) = file.take(12).read_to_end(&mut header) {
        return ImageValidity::Invalid(InvalidReason::Unreadable(e.to_string()));
    }
    if header.is_empty() {
        return ImageValidity::Invalid(InvalidReason::Empty);
    }
    match sniff_format(&header) {
        Some(format) => ImageValidity::Valid(format),
        None => ImageValidity::Invalid(InvalidReason::CorruptHeader),
    }
}

/// One image dropped during validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageExclusion {
    pub encounter_id: String,
    pub image_path: String,
    pub reason: InvalidReason,
}

/// Drops invalid images from every encounter, reporting each exclusion.
pub fn filter_valid_images(encounters: Vec<EncounterRecord>) -> (Vec<EncounterRecord>, Vec<ImageExclusion>) {
    let mut exclusions = Vec::new();
    let kept = encounters
        .into_iter()
        .map(|mut encounter| {
            let encounter_id = encounter.encounter_id.clone();
            encounter
                .image_ids
                .retain(|image| match validate_image(Path::new(image)) {
                    ImageValidity::Valid(_) => true,
                    ImageValidity::Invalid(reason) => {
                        log::warn!("excluding {image} of {encounter_id}: {reason:?}");
                        exclusions.push(ImageExclusion {
                            encounter_id: encounter_id.clone(),
                            image_path: image.clone(),
                            reason,
                        });
                        false
                    }
                });
            encounter
        })
        .collect();
    (kept, exclusions)
}

pub fn batch_file_name(index: usize) -> String {
    format!("batch_{index:03}.jsonl")
}

fn is_batch_file(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with("batch_") && n.ends_with(".jsonl"))
}

fn batch_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| is_batch_file(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Writes samples as `batch_NNN.jsonl` files of at most `batch_size`
/// records. Stale batch files in `out_dir` are removed first.
pub fn serialize_batches(samples: &[Sample], out_dir: &Path, batch_size: usize) -> Result<Vec<PathBuf>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for stale in batch_files(out_dir)? {
        fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    let mut written = Vec::new();
    for (index, chunk) in samples.chunks(batch_size).enumerate() {
        let path = out_dir.join(batch_file_name(index));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut writer = BufWriter::new(file);
        for sample in chunk {
            let line = serde_json::to_string(sample).expect("sample serializes");
            writeln!(writer, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        writer.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Reads every `batch_*.jsonl` file in `dir` in file-name order.
pub fn load_batches(dir: &Path) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for path in batch_files(dir)? {
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        for (line_no, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let sample: Sample = serde_json::from_str(&line).map_err(|e| {
                Error::format(
                    path.display().to_string(),
                    format!("line {}", line_no + 1),
                    e.to_string(),
                )
            })?;
            samples.push(sample);
        }
    }
    Ok(samples)
}
