//! Per-image predictions to encounter-level answers, option indices, slot
//! assignments and submission files.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{QuestionCatalog, NOT_MENTIONED};
use crate::error::{Error, Result};
use crate::text::stable_hash64;

pub const SUBMISSION_JSON: &str = "submission.json";
pub const SUBMISSION_CSV: &str = "submission.csv";
pub const MASKS_DIR: &str = "masks_preds";
const ANSWER_SEPARATOR: &str = ";";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub encounter_id: String,
    pub base_qid: String,
    pub image_path: String,
    pub model_name: String,
    pub answers: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    encounter_id: String,
    base_qid: String,
    image_path: String,
    model_name: String,
    answers: String,
}

/// Reads a prediction CSV (`encounter_id, base_qid, image_path,
/// model_name, answers` with answers joined by semicolons).
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let source = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(&source, "<file>", format!("{other:?}")),
    })?;
    let mut out = Vec::new();
    for (row, record) in reader.deserialize::<PredictionRow>().enumerate() {
        let record = record.map_err(|e| Error::format(&source, format!("row {}", row + 1), e.to_string()))?;
        let answers: Vec<String> = record
            .answers
            .split(ANSWER_SEPARATOR)
            .map(str::trim)
            .filter(|a| !a.is_empty())
            .map(String::from)
            .collect();
        if answers.is_empty() {
            return Err(Error::format(
                &source,
                "answers",
                format!("row {} has no answers", row + 1),
            ));
        }
        out.push(PredictionRecord {
            encounter_id: record.encounter_id,
            base_qid: record.base_qid,
            image_path: record.image_path,
            model_name: record.model_name,
            answers,
        });
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in records {
        writer
            .serialize(PredictionRow {
                encounter_id: r.encounter_id.clone(),
                base_qid: r.base_qid.clone(),
                image_path: r.image_path.clone(),
                model_name: r.model_name.clone(),
                answers: r.answers.join(ANSWER_SEPARATOR),
            })
            .map_err(|e| Error::io(path, e.into()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Per-(encounter, family) seed: the global seed mixed with a stable hash
/// of the pair, so worker scheduling cannot affect tie-breaks.
pub fn seed_material(global_seed: u64, encounter_id: &str, base_qid: &str) -> u64 {
    global_seed ^ stable_hash64(&[encounter_id, base_qid])
}

/// Ranks answers by how many records voted for them, breaking ties with a
/// seeded shuffle of the tied answers, and keeps at most `max_answers`.
/// "Not mentioned" is dropped when real answers make the cut beside it.
pub fn consolidate(records: &[PredictionRecord], max_answers: usize, seed_material: u64) -> Result<Vec<String>> {
    let first = records
        .first()
        .ok_or_else(|| Error::Precondition("consolidate needs at least one record".into()))?;
    if records
        .iter()
        .any(|r| r.encounter_id != first.encounter_id || r.base_qid != first.base_qid)
    {
        return Err(Error::Precondition(
            "consolidate records must share encounter_id and base_qid".into(),
        ));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for record in records {
        let unique: BTreeSet<&str> = record.answers.iter().map(String::as_str).collect();
        for answer in unique {
            *counts.entry(answer).or_default() += 1;
        }
    }
    let mut by_count: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (answer, count) in counts {
        by_count.entry(count).or_default().push(answer);
    }
    let mut ranked: Vec<String> = Vec::new();
    for (count, mut tied) in by_count.into_iter().rev() {
        if tied.len() > 1 {
            // `tied` is already in lexicographic order from the BTreeMap.
            let count_text = count.to_string();
            let mut parts: Vec<&str> = vec![&count_text];
            parts.extend(tied.iter().copied());
            let mut rng = ChaCha8Rng::seed_from_u64(seed_material ^ stable_hash64(&parts));
            tied.shuffle(&mut rng);
            log::debug!("tie at count {count} resolved as {tied:?}");
        }
        ranked.extend(tied.into_iter().map(String::from));
    }
    ranked.truncate(max_answers.max(1));
    if ranked.len() > 1 {
        ranked.retain(|a| a != NOT_MENTIONED);
    }
    Ok(ranked)
}

/// Option index of each answer, in answer order.
pub fn map_to_indices(answers: &[String], options: &[String]) -> Result<Vec<usize>> {
    answers
        .iter()
        .map(|a| {
            options
                .iter()
                .position(|o| o == a)
                .ok_or_else(|| Error::Integrity(format!("answer {a:?} is not among the options")))
        })
        .collect()
}

/// Puts indices into slots in order and fills the rest with `fill_index`.
pub fn distribute_slots(
    indices: &[usize],
    family_slots: &[String],
    fill_index: usize,
) -> Result<BTreeMap<String, usize>> {
    if indices.len() > family_slots.len() {
        return Err(Error::Integrity(format!(
            "{} answers do not fit into {} slots",
            indices.len(),
            family_slots.len()
        )));
    }
    Ok(family_slots
        .iter()
        .enumerate()
        .map(|(i, qid)| (qid.clone(), indices.get(i).copied().unwrap_or(fill_index)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedAnswer {
    pub encounter_id: String,
    pub base_qid: String,
    pub answers: Vec<String>,
    pub slot_indices: BTreeMap<String, usize>,
}

/// Consolidates one (encounter, family) group and assigns its slots.
/// Families without a "Not mentioned" option repeat the top answer's index
/// in unused slots.
pub fn aggregate_group(
    records: &[PredictionRecord],
    catalog: &QuestionCatalog,
    global_seed: u64,
) -> Result<AggregatedAnswer> {
    let first = records
        .first()
        .ok_or_else(|| Error::Precondition("empty prediction group".into()))?;
    let family = catalog
        .family(&first.base_qid)
        .ok_or_else(|| Error::Integrity(format!("unknown question family {}", first.base_qid)))?;
    let seed = seed_material(global_seed, &first.encounter_id, &first.base_qid);
    let answers = consolidate(records, family.max_answers(), seed)?;
    let indices = map_to_indices(&answers, family.options())?;
    let fill = family.lead().not_mentioned_index().unwrap_or(indices[0]);
    let slot_indices = distribute_slots(&indices, &family.slot_qids(), fill)?;
    Ok(AggregatedAnswer {
        encounter_id: first.encounter_id.clone(),
        base_qid: first.base_qid.clone(),
        answers,
        slot_indices,
    })
}

/// Groups records by (encounter, family) and aggregates each group, in
/// sorted key order.
pub fn aggregate_predictions(
    records: &[PredictionRecord],
    catalog: &QuestionCatalog,
    global_seed: u64,
) -> Result<Vec<AggregatedAnswer>> {
    let mut groups: BTreeMap<(&str, &str), Vec<PredictionRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.encounter_id.as_str(), r.base_qid.as_str()))
            .or_default()
            .push(r.clone());
    }
    groups
        .values()
        .map(|group| aggregate_group(group, catalog, global_seed))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionEntry {
    pub encounter_id: String,
    #[serde(flatten)]
    pub indices: BTreeMap<String, usize>,
}

#[derive(Debug, Serialize)]
struct SubmissionRow<'a> {
    encounter_id: &'a str,
    qid: &'a str,
    answer_text: &'a str,
    index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmissionFiles {
    pub json: PathBuf,
    pub csv: PathBuf,
    pub masks_dir: PathBuf,
}

/// Writes `submission.json`, `submission.csv` and an empty `masks_preds/`.
/// Every encounter that appears must carry every family exactly once.
pub fn emit_submission(
    aggregated: &[AggregatedAnswer],
    catalog: &QuestionCatalog,
    out_dir: &Path,
) -> Result<SubmissionFiles> {
    let mut by_encounter: BTreeMap<&str, HashMap<&str, &AggregatedAnswer>> = BTreeMap::new();
    for answer in aggregated {
        if by_encounter
            .entry(&answer.encounter_id)
            .or_default()
            .insert(&answer.base_qid, answer)
            .is_some()
        {
            return Err(Error::Integrity(format!(
                "{} / {} aggregated more than once",
                answer.encounter_id, answer.base_qid
            )));
        }
    }
    let families = catalog.base_qids();
    let mut missing = Vec::new();
    for (encounter, present) in &by_encounter {
        for family in &families {
            if !present.contains_key(family.as_str()) {
                missing.push(format!("{encounter}/{family}"));
            }
        }
        let unknown: HashSet<&&str> = present.keys().filter(|f| catalog.family(f).is_none()).collect();
        if let Some(f) = unknown.into_iter().next() {
            return Err(Error::Integrity(format!("unknown question family {f}")));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Completeness { missing });
    }

    let mut entries = Vec::with_capacity(by_encounter.len());
    let mut rows = Vec::new();
    for (encounter, present) in &by_encounter {
        let mut indices = BTreeMap::new();
        for family in catalog.families() {
            let answer = present[family.base_qid.as_str()];
            for slot in &family.slots {
                let index = *answer
                    .slot_indices
                    .get(&slot.qid)
                    .ok_or_else(|| Error::Integrity(format!("{encounter}: slot {} was not assigned", slot.qid)))?;
                let text = slot.options.get(index).ok_or_else(|| {
                    Error::Integrity(format!("{encounter}: index {index} out of range for {}", slot.qid))
                })?;
                indices.insert(slot.qid.clone(), index);
                rows.push((encounter.to_string(), slot.qid.clone(), text.clone(), index));
            }
        }
        entries.push(SubmissionEntry {
            encounter_id: encounter.to_string(),
            indices,
        });
    }
    rows.sort();

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json_path = out_dir.join(SUBMISSION_JSON);
    let text = serde_json::to_string_pretty(&entries).expect("submission serializes");
    fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;

    let csv_path = out_dir.join(SUBMISSION_CSV);
    let mut writer = csv::Writer::from_path(&csv_path).map_err(|e| Error::io(&csv_path, e.into()))?;
    for (encounter_id, qid, answer_text, index) in &rows {
        writer
            .serialize(SubmissionRow {
                encounter_id,
                qid,
                answer_text,
                index: *index,
            })
            .map_err(|e| Error::io(&csv_path, e.into()))?;
    }
    writer.flush().map_err(|e| Error::io(&csv_path, e))?;

    let masks_dir = out_dir.join(MASKS_DIR);
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    Ok(SubmissionFiles {
        json: json_path,
        csv: csv_path,
        masks_dir,
    })
}
