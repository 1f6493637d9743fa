//! Per-family accuracy against gold annotations and pairwise agreement
//! between prediction sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotationRecord, QuestionFamily, KNOWN_FAMILIES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyScore {
    pub base_qid: String,
    pub accuracy: f64,
    pub n: usize,
}

/// How one encounter's predicted slot indices are scored against gold.
pub trait ScoringPolicy: Send + Sync {
    fn name(&self) -> &'static str;
    /// Score in [0, 1] for one encounter.
    fn score(&self, predicted: &[usize], gold: &[usize]) -> f64;
}

/// Size of the multiset intersection over the longer of the two lists.
/// Computed by walking both lists in sorted order.
#[derive(Debug, Clone, Copy, Default)]
pub struct MultisetOverlap;

impl ScoringPolicy for MultisetOverlap {
    fn name(&self) -> &'static str {
        "multiset-overlap"
    }

    fn score(&self, predicted: &[usize], gold: &[usize]) -> f64 {
        let denom = predicted.len().max(gold.len());
        if denom == 0 {
            return 1.0;
        }
        let mut p = predicted.to_vec();
        let mut g = gold.to_vec();
        p.sort_unstable();
        g.sort_unstable();
        let (mut i, mut j, mut hits) = (0, 0, 0usize);
        while i < p.len() && j < g.len() {
            match p[i].cmp(&g[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    hits += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        hits as f64 / denom as f64
    }
}

/// Sorts both lists, then counts positions holding equal values.
#[derive(Debug, Clone, Copy, Default)]
pub struct SortedSlots;

impl ScoringPolicy for SortedSlots {
    fn name(&self) -> &'static str {
        "sorted-slots"
    }

    fn score(&self, predicted: &[usize], gold: &[usize]) -> f64 {
        let mut p = predicted.to_vec();
        let mut g = gold.to_vec();
        p.sort_unstable();
        g.sort_unstable();
        StrictPositional.score(&p, &g)
    }
}

/// Slot-by-slot comparison in the given order.
#[derive(Debug, Clone, Copy, Default)]
pub struct StrictPositional;

impl ScoringPolicy for StrictPositional {
    fn name(&self) -> &'static str {
        "strict-positional"
    }

    fn score(&self, predicted: &[usize], gold: &[usize]) -> f64 {
        let denom = predicted.len().max(gold.len());
        if denom == 0 {
            return 1.0;
        }
        let hits = predicted.iter().zip(gold).filter(|(a, b)| a == b).count();
        hits as f64 / denom as f64
    }
}

pub fn policy_by_name(name: &str) -> Result<Box<dyn ScoringPolicy>> {
    match name {
        "multiset-overlap" => Ok(Box::new(MultisetOverlap)),
        "sorted-slots" => Ok(Box::new(SortedSlots)),
        "strict-positional" => Ok(Box::new(StrictPositional)),
        other => Err(Error::Config(format!(
            "unknown scoring policy {other:?} (expected multiset-overlap, sorted-slots or strict-positional)"
        ))),
    }
}

/// Indices over the family's slots, in slot order, for every encounter
/// that has at least one of them.
fn family_indices(records: &[AnnotationRecord], family: &QuestionFamily) -> BTreeMap<String, Vec<usize>> {
    records
        .iter()
        .filter_map(|r| {
            let mut any = false;
            let indices: Vec<usize> = family
                .slots
                .iter()
                .filter_map(|slot| r.answers.get(&slot.qid))
                .inspect(|_| any = true)
                .flatten()
                .copied()
                .collect();
            any.then(|| (r.encounter_id.clone(), indices))
        })
        .collect()
}

/// Mean per-encounter policy score for one family. Both sides must cover
/// the same encounters.
pub fn score_family(
    predictions: &[AnnotationRecord],
    gold: &[AnnotationRecord],
    family: &QuestionFamily,
    policy: &dyn ScoringPolicy,
) -> Result<FamilyScore> {
    let predicted = family_indices(predictions, family);
    let expected = family_indices(gold, family);
    let pred_keys: BTreeSet<&String> = predicted.keys().collect();
    let gold_keys: BTreeSet<&String> = expected.keys().collect();
    if pred_keys != gold_keys {
        let missing: Vec<String> = pred_keys
            .symmetric_difference(&gold_keys)
            .map(|e| {
                let side = if gold_keys.contains(e) { "predictions" } else { "gold" };
                format!("{e} ({} in {side})", family.base_qid)
            })
            .collect();
        return Err(Error::Coverage { missing });
    }
    let n = expected.len();
    let total: f64 = expected
        .iter()
        .map(|(encounter, gold_indices)| policy.score(&predicted[encounter], gold_indices))
        .sum();
    Ok(FamilyScore {
        base_qid: family.base_qid.clone(),
        accuracy: if n == 0 { 0.0 } else { total / n as f64 },
        n,
    })
}

/// Unweighted mean over exactly one score per known family.
pub fn average_accuracy(scores: &[FamilyScore]) -> Result<f64> {
    let mut seen = BTreeMap::new();
    for score in scores {
        if !KNOWN_FAMILIES.contains(&score.base_qid.as_str()) {
            return Err(Error::Integrity(format!("unexpected family {}", score.base_qid)));
        }
        if seen.insert(score.base_qid.as_str(), score.accuracy).is_some() {
            return Err(Error::Integrity(format!("family {} scored twice", score.base_qid)));
        }
    }
    let missing: Vec<String> = KNOWN_FAMILIES
        .iter()
        .filter(|f| !seen.contains_key(*f))
        .map(|f| f.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Completeness { missing });
    }
    Ok(seen.values().sum::<f64>() / seen.len() as f64)
}

/// (encounter_id, qid) to the indices given for that slot.
pub type PredictionSet = BTreeMap<(String, String), Vec<usize>>;

pub fn prediction_set(records: &[AnnotationRecord]) -> PredictionSet {
    records
        .iter()
        .flat_map(|r| {
            r.answers
                .iter()
                .map(|(qid, indices)| ((r.encounter_id.clone(), qid.clone()), indices.clone()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementMatrix {
    pub labels: Vec<String>,
    /// Percentages; `rates[i][j]` compares `labels[i]` with `labels[j]`.
    pub rates: Vec<Vec<f64>>,
}

/// Percentage of (encounter, qid) keys on which each pair of sets agrees
/// exactly. All sets must share the same keys.
pub fn agreement_matrix(sets: &[(String, PredictionSet)]) -> Result<AgreementMatrix> {
    let Some((_, reference)) = sets.first() else {
        return Err(Error::Precondition(
            "agreement needs at least one prediction set".into(),
        ));
    };
    let keys: BTreeSet<&(String, String)> = reference.keys().collect();
    if keys.is_empty() {
        return Err(Error::Precondition("prediction sets are empty".into()));
    }
    for (label, set) in &sets[1..] {
        let other: BTreeSet<&(String, String)> = set.keys().collect();
        if other != keys {
            let missing: Vec<String> = keys
                .symmetric_difference(&other)
                .take(20)
                .map(|(e, q)| format!("{e}/{q} ({label} vs {})", sets[0].0))
                .collect();
            return Err(Error::Coverage { missing });
        }
    }
    let n = sets.len();
    let mut rates = vec![vec![100.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let matches = keys.iter().filter(|k| sets[i].1[**k] == sets[j].1[**k]).count();
            let rate = 100.0 * matches as f64 / keys.len() as f64;
            rates[i][j] = rate;
            rates[j][i] = rate;
        }
    }
    Ok(AgreementMatrix {
        labels: sets.iter().map(|(l, _)| l.clone()).collect(),
        rates,
    })
}

/// `family,accuracy,n` rows in the given order plus an `average` row when
/// all families are present.
pub fn scores_csv(scores: &[FamilyScore]) -> String {
    let mut out = String::from("family,accuracy,n\n");
    for s in scores {
        writeln!(out, "{},{:.4},{}", s.base_qid, s.accuracy, s.n).expect("write to string");
    }
    if let Ok(avg) = average_accuracy(scores) {
        let total: usize = scores.iter().map(|s| s.n).sum();
        writeln!(out, "average,{avg:.4},{total}").expect("write to string");
    }
    out
}

pub fn agreement_csv(matrix: &AgreementMatrix) -> String {
    let mut out = String::from("model");
    for label in &matrix.labels {
        write!(out, ",{}", csv_field(label)).expect("write to string");
    }
    out.push('\n');
    for (label, row) in matrix.labels.iter().zip(&matrix.rates) {
        out.push_str(&csv_field(label));
        for rate in row {
            write!(out, ",{rate:.2}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

fn csv_field(text: &str) -> String {
    if text.contains([',', '"', '\n']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
