//! Dermatology knowledge base: ingestion, BM25 keyword index, exhaustive
//! dense index, hybrid candidate generation, cross-encoder style reranking,
//! retrieval gating and query generation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agents::parse_structured_response;
use crate::backends::{
    ChatBackend, ChatRequest, EmbeddingBackend, EmbeddingVector, Message, PairScorer, EMBEDDING_DIM,
};
use crate::dataset::{QuestionDefinition, KNOWN_FAMILIES};
use crate::error::{Error, Result};
use crate::templates::{TemplateSet, QUERY_GENERATION};
use crate::text::{collapse_whitespace, stable_hash_hex, tokenize};

/// On-disk layout version of a persisted knowledge index.
pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeDocument {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub source_tag: String,
}

impl KnowledgeDocument {
    pub fn indexed_text(&self) -> String {
        format!("{} {}", self.title, self.body)
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub documents: Vec<KnowledgeDocument>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RawDocument {
    #[serde(default, alias = "doc_id")]
    id: Option<String>,
    #[serde(default)]
    title: String,
    #[serde(default)]
    body: String,
    #[serde(default, alias = "source_tag")]
    source: String,
}

/// Deterministic id for documents that arrive without one.
pub fn derived_doc_id(title: &str, body: &str) -> String {
    format!("kb-{}", &stable_hash_hex(&[title, body])[..16])
}

/// Reads a knowledge base from JSONL (`{id?, title, body, source}` per line)
/// or, for `.csv` files, a CSV with the same column names.
pub fn ingest_knowledge_base(path: &Path) -> Result<IngestReport> {
    let source_name = path.display().to_string();
    let is_csv = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    if is_csv {
        let mut reader = csv::Reader::from_reader(file);
        for (row, record) in reader.deserialize::<RawDocument>().enumerate() {
            raw.push(record.map_err(|e| Error::format(&source_name, format!("row {}", row + 1), e.to_string()))?);
        }
    } else {
        for (line_no, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            raw.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::format(&source_name, format!("line {}", line_no + 1), e.to_string()))?,
            );
        }
    }

    let mut report = IngestReport::default();
    if raw.is_empty() {
        let msg = format!("knowledge base {source_name} is empty");
        log::warn!("{msg}");
        report.warnings.push(msg);
        return Ok(report);
    }
    let mut seen = HashSet::new();
    for (n, entry) in raw.into_iter().enumerate() {
        if entry.body.trim().is_empty() {
            let msg = format!("entry {} ({:?}) has an empty body; skipped", n + 1, entry.title);
            log::warn!("{msg}");
            report.warnings.push(msg);
            continue;
        }
        let doc_id = entry
            .id
            .filter(|id| !id.trim().is_empty())
            .unwrap_or_else(|| derived_doc_id(&entry.title, &entry.body));
        if !seen.insert(doc_id.clone()) {
            return Err(Error::Integrity(format!("duplicate knowledge doc_id {doc_id}")));
        }
        report.documents.push(KnowledgeDocument {
            doc_id,
            title: entry.title,
            body: entry.body,
            source_tag: entry.source,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.5, b: 0.75 }
    }
}

/// Okapi BM25 index over tokenized documents.
///
/// IDF uses the `ln((N - df + 0.5) / (df + 0.5) + 1)` variant, which never
/// goes negative. Query tokens are scored as given, so a repeated query
/// token contributes once per occurrence.
#[derive(Debug, Clone)]
pub struct KeywordIndex {
    params: Bm25Params,
    doc_ids: Vec<String>,
    positions: HashMap<String, usize>,
    term_freqs: Vec<HashMap<String, u32>>,
    doc_lengths: Vec<usize>,
    avg_doc_length: f64,
    doc_freq: HashMap<String, usize>,
}

impl KeywordIndex {
    /// Builds from `(doc_id, tokens)` pairs.
    pub fn build<I>(docs: I, params: Bm25Params) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<String>)>,
    {
        let mut index = Self {
            params,
            doc_ids: Vec::new(),
            positions: HashMap::new(),
            term_freqs: Vec::new(),
            doc_lengths: Vec::new(),
            avg_doc_length: 0.0,
            doc_freq: HashMap::new(),
        };
        for (doc_id, tokens) in docs {
            if index.positions.insert(doc_id.clone(), index.doc_ids.len()).is_some() {
                return Err(Error::Integrity(format!("duplicate doc_id {doc_id} in keyword index")));
            }
            let mut tf: HashMap<String, u32> = HashMap::new();
            for token in &tokens {
                *tf.entry(token.clone()).or_default() += 1;
            }
            for term in tf.keys() {
                *index.doc_freq.entry(term.clone()).or_default() += 1;
            }
            index.doc_ids.push(doc_id);
            index.doc_lengths.push(tokens.len());
            index.term_freqs.push(tf);
        }
        if !index.doc_lengths.is_empty() {
            index.avg_doc_length = index.doc_lengths.iter().sum::<usize>() as f64 / index.doc_lengths.len() as f64;
        }
        Ok(index)
    }

    pub fn from_documents(docs: &[KnowledgeDocument], params: Bm25Params) -> Result<Self> {
        Self::build(
            docs.iter().map(|d| (d.doc_id.clone(), tokenize(&d.indexed_text()))),
            params,
        )
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<usize> {
        self.positions.get(doc_id).map(|&i| self.doc_lengths[i])
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = self.doc_freq(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn score_position(&self, position: usize, query_tokens: &[String]) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf_table = &self.term_freqs[position];
        let length_ratio = self.doc_lengths[position] as f64 / self.avg_doc_length;
        query_tokens
            .iter()
            .map(|term| match tf_table.get(term) {
                Some(&tf) => {
                    let tf = f64::from(tf);
                    self.idf(term) * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * length_ratio))
                }
                None => 0.0,
            })
            .sum()
    }

    pub fn bm25_score(&self, query_tokens: &[String], doc_id: &str) -> Result<f64> {
        let &position = self
            .positions
            .get(doc_id)
            .ok_or_else(|| Error::Lookup(format!("doc_id {doc_id} is not indexed")))?;
        Ok(self.score_position(position, query_tokens))
    }

    /// Top-`k` documents with a positive score, best first, ties by doc_id.
    pub fn search(&self, query_tokens: &[String], k: usize) -> Vec<(String, f64)> {
        let mut scored: Vec<(String, f64)> = (0..self.doc_ids.len())
            .map(|i| (self.doc_ids[i].clone(), self.score_position(i, query_tokens)))
            .filter(|(_, score)| *score > 0.0)
            .collect();
        sort_scored(&mut scored);
        scored.truncate(k);
        scored
    }
}

fn sort_scored(items: &mut [(String, f64)]) {
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Keyword,
    Dense,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCandidate {
    pub doc_id: String,
    /// BM25 score; absent when the document came only from the dense channel.
    pub keyword_score: Option<f64>,
    /// Cosine similarity; absent when the document came only from BM25.
    pub dense_score: Option<f64>,
    pub rerank_score: Option<f64>,
    pub origin: Origin,
}

/// Exhaustive cosine index over unit vectors.
#[derive(Debug, Clone, Default)]
pub struct DenseIndex {
    doc_ids: Vec<String>,
    vectors: Vec<EmbeddingVector>,
}

impl DenseIndex {
    pub fn new(entries: Vec<(String, EmbeddingVector)>) -> Self {
        let (doc_ids, vectors) = entries.into_iter().unzip();
        Self { doc_ids, vectors }
    }

    /// Builds from raw component vectors, normalizing each.
    pub fn from_raw(entries: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let mut out = Vec::with_capacity(entries.len());
        for (doc_id, values) in entries {
            out.push((doc_id, EmbeddingVector::normalized(values)?));
        }
        Ok(Self::new(out))
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.doc_ids.iter().map(String::as_str).zip(&self.vectors)
    }
}

/// Exact top-`k` by cosine similarity, ties broken by ascending doc_id.
pub fn dense_search(query: &EmbeddingVector, index: &DenseIndex, k: usize) -> Vec<RetrievalCandidate> {
    let mut scored: Vec<(String, f64)> = index
        .entries()
        .map(|(id, v)| (id.to_string(), query.cosine(v)))
        .collect();
    sort_scored(&mut scored);
    scored.truncate(k);
    scored
        .into_iter()
        .map(|(doc_id, score)| RetrievalCandidate {
            doc_id,
            keyword_score: None,
            dense_score: Some(score),
            rerank_score: None,
            origin: Origin::Dense,
        })
        .collect()
}

/// Merges keyword-channel and dense-channel candidates by doc_id. Keyword
/// results come first in their order, then dense-only results in theirs.
pub fn merge_candidates(keyword: &[(String, f64)], dense: &[RetrievalCandidate]) -> Vec<RetrievalCandidate> {
    let mut merged: Vec<RetrievalCandidate> = Vec::with_capacity(keyword.len() + dense.len());
    let mut position: HashMap<String, usize> = HashMap::new();
    let max_opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, None) => x,
        (None, y) => y,
    };
    for (doc_id, score) in keyword {
        match position.get(doc_id) {
            Some(&i) => merged[i].keyword_score = max_opt(merged[i].keyword_score, Some(*score)),
            None => {
                position.insert(doc_id.clone(), merged.len());
                merged.push(RetrievalCandidate {
                    doc_id: doc_id.clone(),
                    keyword_score: Some(*score),
                    dense_score: None,
                    rerank_score: None,
                    origin: Origin::Keyword,
                });
            }
        }
    }
    for candidate in dense {
        match position.get(&candidate.doc_id) {
            Some(&i) => {
                let existing = &mut merged[i];
                existing.dense_score = max_opt(existing.dense_score, candidate.dense_score);
                if existing.origin == Origin::Keyword {
                    existing.origin = Origin::Both;
                }
            }
            None => {
                position.insert(candidate.doc_id.clone(), merged.len());
                merged.push(RetrievalCandidate {
                    origin: Origin::Dense,
                    ..candidate.clone()
                });
            }
        }
    }
    merged
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridResult {
    pub candidates: Vec<RetrievalCandidate>,
    /// Set when the dense channel failed and only keyword results are used.
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankResult {
    pub candidates: Vec<RetrievalCandidate>,
    /// Set when the scorer failed and keyword ordering was used instead.
    pub degraded: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexManifest {
    format_version: u32,
    dimension: usize,
    count: usize,
    embedding_file: String,
    documents_file: String,
    doc_ids: Vec<String>,
}

const EMBEDDINGS_FILE: &str = "embeddings.f32";
const DOCUMENTS_FILE: &str = "documents.jsonl";
const MANIFEST_FILE: &str = "manifest.json";

/// Documents plus both retrieval indexes. Immutable after construction.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    documents: Vec<KnowledgeDocument>,
    positions: HashMap<String, usize>,
    keyword: KeywordIndex,
    dense: DenseIndex,
}

impl KnowledgeBase {
    /// Embeds every document (title and body) and builds both indexes.
    pub fn build(
        documents: Vec<KnowledgeDocument>,
        embedder: &dyn EmbeddingBackend,
        params: Bm25Params,
    ) -> Result<Self> {
        let mut vectors = Vec::with_capacity(documents.len());
        for chunk in documents.chunks(64) {
            let texts: Vec<String> = chunk.iter().map(KnowledgeDocument::indexed_text).collect();
            let embedded = embedder.embed(&texts)?;
            if embedded.len() != texts.len() {
                return Err(Error::Integrity(format!(
                    "embedder returned {} vectors for {} texts",
                    embedded.len(),
                    texts.len()
                )));
            }
            vectors.extend(embedded);
        }
        let dense = DenseIndex::new(documents.iter().map(|d| d.doc_id.clone()).zip(vectors).collect());
        Self::assemble(documents, dense, params)
    }

    fn assemble(documents: Vec<KnowledgeDocument>, dense: DenseIndex, params: Bm25Params) -> Result<Self> {
        let keyword = KeywordIndex::from_documents(&documents, params)?;
        let positions = documents
            .iter()
            .enumerate()
            .map(|(i, d)| (d.doc_id.clone(), i))
            .collect();
        Ok(Self {
            documents,
            positions,
            keyword,
            dense,
        })
    }

    pub fn documents(&self) -> &[KnowledgeDocument] {
        &self.documents
    }

    pub fn document(&self, doc_id: &str) -> Option<&KnowledgeDocument> {
        self.positions.get(doc_id).map(|&i| &self.documents[i])
    }

    pub fn keyword_index(&self) -> &KeywordIndex {
        &self.keyword
    }

    pub fn dense_index(&self) -> &DenseIndex {
        &self.dense
    }

    /// Writes `manifest.json`, `documents.jsonl` and the embedding matrix as
    /// little-endian f32 rows.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let docs_path = dir.join(DOCUMENTS_FILE);
        let mut writer = BufWriter::new(fs::File::create(&docs_path).map_err(|e| Error::io(&docs_path, e))?);
        for doc in &self.documents {
            let line = serde_json::json!({
                "id": doc.doc_id, "title": doc.title, "body": doc.body, "source": doc.source_tag
            });
            writeln!(writer, "{line}").map_err(|e| Error::io(&docs_path, e))?;
        }
        writer.flush().map_err(|e| Error::io(&docs_path, e))?;

        let emb_path = dir.join(EMBEDDINGS_FILE);
        let mut bytes = Vec::with_capacity(self.dense.len() * EMBEDDING_DIM * 4);
        for (_, vector) in self.dense.entries() {
            for value in vector.as_slice() {
                bytes.extend_from_slice(&value.to_le_bytes());
            }
        }
        fs::write(&emb_path, bytes).map_err(|e| Error::io(&emb_path, e))?;

        let manifest = IndexManifest {
            format_version: INDEX_FORMAT_VERSION,
            dimension: EMBEDDING_DIM,
            count: self.documents.len(),
            embedding_file: EMBEDDINGS_FILE.into(),
            documents_file: DOCUMENTS_FILE.into(),
            doc_ids: self.documents.iter().map(|d| d.doc_id.clone()).collect(),
        };
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))
    }

    pub fn load(dir: &Path, params: Bm25Params) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: IndexManifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(manifest_path.display().to_string(), "<root>", e.to_string()))?;
        if manifest.format_version != INDEX_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "index format {} is not supported (expected {INDEX_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        if manifest.dimension != EMBEDDING_DIM {
            return Err(Error::Shape {
                expected: EMBEDDING_DIM,
                actual: manifest.dimension,
            });
        }
        let documents = ingest_knowledge_base(&dir.join(&manifest.documents_file))?.documents;
        let ids: Vec<&String> = documents.iter().map(|d| &d.doc_id).collect();
        if ids.len() != manifest.count || ids.iter().zip(&manifest.doc_ids).any(|(a, b)| *a != b) {
            return Err(Error::Integrity("index documents do not match manifest".into()));
        }

        let emb_path = dir.join(&manifest.embedding_file);
        let mut bytes = Vec::new();
        fs::File::open(&emb_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&emb_path, e))?;
        if bytes.len() != manifest.count * EMBEDDING_DIM * 4 {
            return Err(Error::Integrity(format!(
                "{} holds {} bytes, expected {}",
                emb_path.display(),
                bytes.len(),
                manifest.count * EMBEDDING_DIM * 4
            )));
        }
        let vectors = bytes
            .chunks_exact(EMBEDDING_DIM * 4)
            .map(|row| {
                let values = row
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                EmbeddingVector::from_unit(values)
            })
            .collect::<Result<Vec<_>>>()?;
        let dense = DenseIndex::new(manifest.doc_ids.into_iter().zip(vectors).collect());
        Self::assemble(documents, dense, params)
    }

    /// Top-`k_each` keyword hits and top-`k_each` dense hits, merged by
    /// doc_id. An embedding failure degrades to keyword-only results.
    pub fn hybrid_search(&self, query: &str, k_each: usize, embedder: &dyn EmbeddingBackend) -> HybridResult {
        let keyword = self.keyword.search(&tokenize(query), k_each);
        let (dense, degraded) = match embedder.embed(&[query.to_string()]) {
            Ok(vectors) if vectors.len() == 1 => (dense_search(&vectors[0], &self.dense, k_each), false),
            Ok(vectors) => {
                log::warn!(
                    "embedder returned {} vectors for one query; keyword-only",
                    vectors.len()
                );
                (Vec::new(), true)
            }
            Err(e) => {
                log::warn!("dense retrieval unavailable, keyword-only: {e}");
                (Vec::new(), true)
            }
        };
        HybridResult {
            candidates: merge_candidates(&keyword, &dense),
            degraded,
        }
    }

    /// Scores each (query, document body) pair and keeps the best `top_k`.
    /// Scorer failure falls back to keyword-score ordering.
    pub fn rerank(
        &self,
        query: &str,
        candidates: &[RetrievalCandidate],
        scorer: &dyn PairScorer,
        top_k: usize,
    ) -> Result<RerankResult> {
        if candidates.is_empty() {
            return Ok(RerankResult {
                candidates: Vec::new(),
                degraded: false,
            });
        }
        let passages = candidates
            .iter()
            .map(|c| {
                self.document(&c.doc_id)
                    .map(|d| d.body.clone())
                    .ok_or_else(|| Error::Lookup(format!("doc_id {} is not in the knowledge base", c.doc_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let scored = match scorer.score_pairs(query, &passages) {
            Ok(scores) if scores.len() == candidates.len() => Some(scores),
            Ok(scores) => {
                log::warn!(
                    "scorer returned {} scores for {} passages",
                    scores.len(),
                    candidates.len()
                );
                None
            }
            Err(e) => {
                log::warn!("reranker unavailable, using keyword order: {e}");
                None
            }
        };
        let degraded = scored.is_none();
        let mut out: Vec<RetrievalCandidate> = candidates.to_vec();
        match scored {
            Some(scores) => {
                for (candidate, score) in out.iter_mut().zip(scores) {
                    candidate.rerank_score = Some(score);
                }
                out.sort_by(|a, b| {
                    b.rerank_score
                        .unwrap_or(f64::NEG_INFINITY)
                        .total_cmp(&a.rerank_score.unwrap_or(f64::NEG_INFINITY))
                        .then_with(|| a.doc_id.cmp(&b.doc_id))
                });
            }
            None => out.sort_by(|a, b| {
                b.keyword_score
                    .unwrap_or(0.0)
                    .total_cmp(&a.keyword_score.unwrap_or(0.0))
                    .then_with(|| a.doc_id.cmp(&b.doc_id))
            }),
        }
        out.truncate(top_k);
        Ok(RerankResult {
            candidates: out,
            degraded,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalGating {
    /// Families answered from the image alone; retrieval is skipped.
    pub image_dependent_families: Vec<String>,
    /// Question types treated the same way.
    pub image_dependent_types: Vec<String>,
}

impl Default for RetrievalGating {
    fn default() -> Self {
        Self {
            image_dependent_families: vec!["CQID034".into(), "CQID012".into()],
            image_dependent_types: Vec::new(),
        }
    }
}

/// Whether knowledge retrieval runs for a question. Unknown families
/// default to retrieving, with a warning.
pub fn should_retrieve(question_type: &str, base_qid: &str, gating: &RetrievalGating) -> bool {
    if gating.image_dependent_families.iter().any(|f| f == base_qid)
        || gating
            .image_dependent_types
            .iter()
            .any(|t| t.eq_ignore_ascii_case(question_type))
    {
        return false;
    }
    if !KNOWN_FAMILIES.contains(&base_qid) {
        log::warn!("unknown question family {base_qid}; retrieval enabled by default");
    }
    true
}

/// Search terms describing what a question family asks about.
pub fn question_focus(question: &QuestionDefinition) -> String {
    let focus = match question.base_qid.as_str() {
        "CQID010" => "extent body coverage",
        "CQID011" => "common body locations",
        "CQID012" => "lesion size",
        "CQID015" => "onset duration course",
        "CQID020" => "lesion morphology appearance",
        "CQID025" => "itching symptoms",
        "CQID034" => "lesion color",
        "CQID035" => "number of lesions",
        "CQID036" => "lesion texture",
        _ => "",
    };
    if focus.is_empty() {
        tokenize(&question.question_text).join(" ")
    } else {
        focus.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub queries: Vec<String>,
    /// Set when the template fallback replaced backend output.
    pub fallback: bool,
    /// Set when the fallback was forced by a backend failure.
    #[serde(default)]
    pub degraded: bool,
}

fn template_queries(diagnoses: &[String], question: &QuestionDefinition, max_queries: usize) -> Vec<String> {
    let focus = question_focus(question);
    let mut seen = HashSet::new();
    diagnoses
        .iter()
        .map(|d| collapse_whitespace(&format!("{d} {focus}")))
        .filter(|q| seen.insert(q.clone()))
        .take(max_queries)
        .collect()
}

fn parse_queries(raw: &str, max_queries: usize) -> Option<Vec<String>> {
    let value = parse_structured_response(raw).ok()?;
    let mut seen = HashSet::new();
    let queries: Vec<String> = value
        .get("queries")?
        .as_array()?
        .iter()
        .filter_map(Value::as_str)
        .map(collapse_whitespace)
        .filter(|q| !q.is_empty() && seen.insert(q.to_lowercase()))
        .take(max_queries)
        .collect();
    (!queries.is_empty()).then_some(queries)
}

/// Retrieval queries pairing leading diagnoses with the question's focus.
/// With no diagnoses a single question-derived query is produced without a
/// backend call.
pub fn generate_queries(
    diagnoses: &[String],
    question: &QuestionDefinition,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
    max_queries: usize,
    fixture_keys: Vec<String>,
) -> Result<QueryPlan> {
    let max_queries = max_queries.max(1);
    if diagnoses.is_empty() {
        let focus = question_focus(question);
        let base = tokenize(&question.question_text).join(" ");
        let query = if focus == base {
            base
        } else {
            collapse_whitespace(&format!("{base} {focus}"))
        };
        return Ok(QueryPlan {
            queries: vec![query],
            fallback: false,
            degraded: false,
        });
    }
    let prompt = templates.render(
        QUERY_GENERATION,
        &[
            ("diagnoses", &diagnoses.join(", ")),
            ("question", &question.question_text),
            ("question_type", &question.question_type),
            ("focus", &question_focus(question)),
            ("max_queries", &max_queries.to_string()),
        ],
    )?;
    let request = ChatRequest::new(QUERY_GENERATION, vec![Message::user(prompt)]).with_keys(fixture_keys);
    let (parsed, degraded) = match backend.chat(&request) {
        Ok(raw) => (parse_queries(&raw, max_queries), false),
        Err(e) => {
            log::warn!("query generation failed, using templates: {e}");
            (None, true)
        }
    };
    Ok(match parsed {
        Some(queries) => QueryPlan {
            queries,
            fallback: false,
            degraded,
        },
        None => QueryPlan {
            queries: template_queries(diagnoses, question, max_queries),
            fallback: true,
            degraded,
        },
    })
}

/// Rerank scores keyed by doc_id, for trace payloads.
pub fn candidate_summary(candidates: &[RetrievalCandidate]) -> BTreeMap<String, Option<f64>> {
    candidates.iter().map(|c| (c.doc_id.clone(), c.rerank_score)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{MockChatBackend, MockEmbedder, MockFixtures, MockPairScorer};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use serde_json::json;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn index_of(docs: &[&str], params: Bm25Params) -> KeywordIndex {
        KeywordIndex::build(docs.iter().enumerate().map(|(i, d)| (format!("d{i}"), toks(d))), params).unwrap()
    }

    /// Straight transcription of the Okapi formula over raw token lists.
    fn oracle_bm25(corpus: &[Vec<String>], query: &[String], doc: usize, k1: f64, b: f64) -> f64 {
        let n = corpus.len() as f64;
        let avgdl = corpus.iter().map(Vec::len).sum::<usize>() as f64 / n;
        let mut total = 0.0;
        for term in query {
            let df = corpus.iter().filter(|d| d.contains(term)).count() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            let tf = corpus[doc].iter().filter(|t| *t == term).count() as f64;
            let dl = corpus[doc].len() as f64;
            total += idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * dl / avgdl));
        }
        total
    }

    #[test]
    fn bm25_matches_hand_computed_values() {
        let index = index_of(&["cat sat", "cat cat ran", "dog ran"], Bm25Params::default());
        let q = toks("cat");
        let expected = [0.5022939549191067, 0.6149580195738596, 0.0];
        for (i, want) in expected.iter().enumerate() {
            let got = index.bm25_score(&q, &format!("d{i}")).unwrap();
            assert!((got - want).abs() < 1e-9, "d{i}: {got} vs {want}");
        }
        assert!((index.avg_doc_length() - 7.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_term_scores_zero_and_unknown_doc_errors() {
        let index = index_of(&["cat sat", "dog ran"], Bm25Params::default());
        assert_eq!(index.bm25_score(&toks("zebra"), "d0").unwrap(), 0.0);
        assert!(matches!(index.bm25_score(&toks("cat"), "nope"), Err(Error::Lookup(_))));
    }

    #[test]
    fn ubiquitous_term_keeps_positive_idf() {
        let index = index_of(&["cat a1", "cat b1"], Bm25Params::default());
        let idf = index.idf("cat");
        assert!((idf - 0.1823215567939546).abs() < 1e-12);
        assert!(idf > 0.0);
    }

    #[test]
    fn keyword_search_orders_and_drops_zero_scores() {
        let index = index_of(&["cat sat", "cat cat ran", "dog ran"], Bm25Params::default());
        let hits = index.search(&toks("cat"), 10);
        assert_eq!(hits.iter().map(|h| h.0.as_str()).collect::<Vec<_>>(), ["d1", "d0"]);
    }

    fn unit(values: &[(usize, f32)]) -> EmbeddingVector {
        let mut v = vec![0.0; EMBEDDING_DIM];
        for &(i, x) in values {
            v[i] = x;
        }
        EmbeddingVector::normalized(v).unwrap()
    }

    #[test]
    fn dense_identity_and_orthogonality() {
        let index = DenseIndex::new(vec![("a".into(), unit(&[(0, 1.0)])), ("b".into(), unit(&[(1, 1.0)]))]);
        let hits = dense_search(&unit(&[(0, 1.0)]), &index, 2);
        assert_eq!(hits[0].doc_id, "a");
        assert!((hits[0].dense_score.unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(hits[1].dense_score.unwrap(), 0.0);
    }

    #[test]
    fn dense_ties_break_by_doc_id_and_shape_is_checked() {
        let same = unit(&[(3, 1.0)]);
        let index = DenseIndex::new(vec![("z".into(), same.clone()), ("m".into(), same.clone())]);
        let hits = dense_search(&same, &index, 2);
        assert_eq!(hits[0].doc_id, "m");
        assert!(matches!(
            DenseIndex::from_raw(vec![("x".into(), vec![1.0; 10])]),
            Err(Error::Shape {
                expected: 768,
                actual: 10
            })
        ));
    }

    #[test]
    fn dense_matches_exhaustive_oracle_on_seeded_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut raw = || {
            (0..EMBEDDING_DIM)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect::<Vec<f32>>()
        };
        let entries: Vec<(String, Vec<f32>)> = (0..5).map(|i| (format!("doc{i}"), raw())).collect();
        let query = EmbeddingVector::normalized(raw()).unwrap();
        let index = DenseIndex::from_raw(entries.clone()).unwrap();
        let mut oracle: Vec<(String, f64)> = entries
            .iter()
            .map(|(id, v)| {
                let dot: f64 = v
                    .iter()
                    .zip(query.as_slice())
                    .map(|(a, b)| f64::from(*a) * f64::from(*b))
                    .sum();
                let norm: f64 = v.iter().map(|a| f64::from(*a).powi(2)).sum::<f64>().sqrt();
                (id.clone(), dot / norm)
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let got: Vec<String> = dense_search(&query, &index, 3).into_iter().map(|c| c.doc_id).collect();
        let want: Vec<String> = oracle.into_iter().take(3).map(|o| o.0).collect();
        assert_eq!(got, want);
    }

    fn doc(id: &str, title: &str, body: &str) -> KnowledgeDocument {
        KnowledgeDocument {
            doc_id: id.into(),
            title: title.into(),
            body: body.into(),
            source_tag: "test".into(),
        }
    }

    fn small_kb() -> KnowledgeBase {
        let docs = vec![
            doc(
                "eczema",
                "Eczema",
                "Eczema commonly affects hands, elbows and behind the knees with itchy patches.",
            ),
            doc(
                "psoriasis",
                "Psoriasis",
                "Psoriasis causes thick scaly plaques on elbows, knees and scalp.",
            ),
            doc(
                "sunburn",
                "Sunburn",
                "Sunburn is red painful skin after ultraviolet exposure.",
            ),
            doc(
                "contact",
                "Contact dermatitis",
                "Contact dermatitis follows exposure to irritants such as cement on the hands.",
            ),
        ];
        KnowledgeBase::build(docs, &MockEmbedder::new(1), Bm25Params::default()).unwrap()
    }

    #[test]
    fn hybrid_deduplicates_and_marks_both() {
        let kb = small_kb();
        let result = kb.hybrid_search("eczema hands itchy", 3, &MockEmbedder::new(1));
        assert!(!result.degraded);
        let top = result.candidates.iter().find(|c| c.doc_id == "eczema").unwrap();
        assert_eq!(top.origin, Origin::Both);
        assert!(top.keyword_score.is_some() && top.dense_score.is_some());
        let ids: HashSet<&str> = result.candidates.iter().map(|c| c.doc_id.as_str()).collect();
        assert_eq!(ids.len(), result.candidates.len());
    }

    #[test]
    fn disjoint_channels_give_all_candidates() {
        let keyword = vec![("a".into(), 2.0), ("b".into(), 1.5), ("c".into(), 1.0)];
        let dense: Vec<RetrievalCandidate> = ["d", "e", "f"]
            .iter()
            .map(|id| RetrievalCandidate {
                doc_id: id.to_string(),
                keyword_score: None,
                dense_score: Some(0.5),
                rerank_score: None,
                origin: Origin::Dense,
            })
            .collect();
        assert_eq!(merge_candidates(&keyword, &dense).len(), 6);
    }

    #[test]
    fn embedding_outage_degrades_to_keyword_only() {
        let kb = small_kb();
        let result = kb.hybrid_search("psoriasis elbows", 3, &MockEmbedder::unavailable());
        assert!(result.degraded);
        assert!(!result.candidates.is_empty());
        assert!(result.candidates.iter().all(|c| c.origin == Origin::Keyword));
    }

    #[test]
    fn rerank_follows_overlap_oracle() {
        let kb = small_kb();
        let query = "thick scaly plaques elbows";
        let candidates = kb.hybrid_search(query, 4, &MockEmbedder::new(1)).candidates;
        let out = kb.rerank(query, &candidates, &MockPairScorer::new(), 3).unwrap();
        assert!(!out.degraded);
        let mut oracle: Vec<(String, f64)> = candidates
            .iter()
            .map(|c| {
                let body = &kb.document(&c.doc_id).unwrap().body;
                (c.doc_id.clone(), crate::backends::token_overlap(query, body))
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let got: Vec<&str> = out.candidates.iter().map(|c| c.doc_id.as_str()).collect();
        let want: Vec<&str> = oracle.iter().take(3).map(|o| o.0.as_str()).collect();
        assert_eq!(got, want);
        assert!(out.candidates.iter().all(|c| c.rerank_score.is_some()));
    }

    #[test]
    fn rerank_single_and_truncation() {
        let kb = small_kb();
        let all = kb.hybrid_search("skin", 4, &MockEmbedder::new(1)).candidates;
        assert!(all.len() >= 4);
        let one = kb.rerank("skin", &all[..1], &MockPairScorer::new(), 3).unwrap();
        assert_eq!(one.candidates.len(), 1);
        assert_eq!(one.candidates[0].doc_id, all[0].doc_id);
        assert!(one.candidates[0].rerank_score.is_some());
        let top2 = kb.rerank("skin", &all, &MockPairScorer::new(), 2).unwrap();
        assert_eq!(top2.candidates.len(), 2);
    }

    #[test]
    fn rerank_outage_falls_back_to_keyword_order() {
        let kb = small_kb();
        let candidates = kb.hybrid_search("elbows knees", 4, &MockEmbedder::new(1)).candidates;
        let out = kb
            .rerank("elbows knees", &candidates, &MockPairScorer::unavailable(), 2)
            .unwrap();
        assert!(out.degraded);
        let scores: Vec<f64> = out.candidates.iter().map(|c| c.keyword_score.unwrap_or(0.0)).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn save_and_load_round_trip() {
        let kb = small_kb();
        let dir = tempfile::tempdir().unwrap();
        kb.save(dir.path()).unwrap();
        let loaded = KnowledgeBase::load(dir.path(), Bm25Params::default()).unwrap();
        assert_eq!(loaded.documents(), kb.documents());
        let a: Vec<_> = kb
            .dense_index()
            .entries()
            .map(|(i, v)| (i.to_string(), v.clone()))
            .collect();
        let b: Vec<_> = loaded
            .dense_index()
            .entries()
            .map(|(i, v)| (i.to_string(), v.clone()))
            .collect();
        assert_eq!(a, b);
        let bytes = fs::metadata(dir.path().join(EMBEDDINGS_FILE)).unwrap().len();
        assert_eq!(bytes as usize, 4 * EMBEDDING_DIM * 4);
    }

    #[test]
    fn ingest_rules() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        fs::write(
            &path,
            "{\"title\":\"Acne\",\"body\":\"Pimples.\",\"source\":\"aad\"}\n{\"id\":\"x\",\"title\":\"Empty\",\"body\":\" \",\"source\":\"aad\"}\n",
        )
        .unwrap();
        let report = ingest_knowledge_base(&path).unwrap();
        assert_eq!(report.documents.len(), 1);
        assert_eq!(report.documents[0].doc_id, derived_doc_id("Acne", "Pimples."));
        assert_eq!(report.warnings.len(), 1);

        let empty = dir.path().join("empty.jsonl");
        fs::write(&empty, "").unwrap();
        let report = ingest_knowledge_base(&empty).unwrap();
        assert!(report.documents.is_empty() && report.warnings.len() == 1);

        let dup = dir.path().join("dup.jsonl");
        fs::write(
            &dup,
            "{\"title\":\"A\",\"body\":\"B\"}\n{\"title\":\"A\",\"body\":\"B\"}\n",
        )
        .unwrap();
        assert!(matches!(ingest_knowledge_base(&dup), Err(Error::Integrity(_))));

        let csv_path = dir.path().join("kb.csv");
        fs::write(&csv_path, "id,title,body,source\nk1,Hives,Raised welts,aad\n").unwrap();
        assert_eq!(ingest_knowledge_base(&csv_path).unwrap().documents[0].doc_id, "k1");
    }

    #[test]
    fn gating_defaults() {
        let gating = RetrievalGating::default();
        assert!(!should_retrieve("Lesion Color", "CQID034", &gating));
        assert!(!should_retrieve("Size", "CQID012", &gating));
        assert!(should_retrieve("Site Location", "CQID011", &gating));
        assert!(should_retrieve("Mystery", "CQID999", &gating));
        let by_type = RetrievalGating {
            image_dependent_families: vec![],
            image_dependent_types: vec!["texture".into()],
        };
        assert!(!should_retrieve("Texture", "CQID036", &by_type));
    }

    fn location_question() -> QuestionDefinition {
        QuestionDefinition {
            qid: "CQID011-001".into(),
            base_qid: "CQID011".into(),
            slot_index: 0,
            question_text: "Where is the affected area?".into(),
            options: vec!["back".into(), "Not mentioned".into()],
            question_type: "Site Location".into(),
            question_category: "General".into(),
            max_answers: 1,
        }
    }

    #[test]
    fn query_generation_uses_backend_then_falls_back() {
        let diagnoses = vec!["eczema".to_string(), "dermatitis".to_string()];
        let templates = TemplateSet::builtin();
        let mock = MockChatBackend::new(MockFixtures::default().with(
            QUERY_GENERATION,
            "*",
            json!({"queries": ["eczema common body locations", "dermatitis site distribution patterns", "extra"]}),
        ));
        let plan = generate_queries(&diagnoses, &location_question(), &mock, &templates, 3, vec![]).unwrap();
        assert!(!plan.fallback);
        assert!(plan.queries.contains(&"eczema common body locations".to_string()));
        assert!(plan
            .queries
            .contains(&"dermatitis site distribution patterns".to_string()));

        let one = generate_queries(&diagnoses, &location_question(), &mock, &templates, 1, vec![]).unwrap();
        assert_eq!(one.queries.len(), 1);

        let broken = MockChatBackend::new(MockFixtures::default());
        let plan = generate_queries(&diagnoses, &location_question(), &broken, &templates, 3, vec![]).unwrap();
        assert!(plan.fallback);
        assert_eq!(
            plan.queries,
            ["eczema common body locations", "dermatitis common body locations"]
        );
    }

    #[test]
    fn empty_diagnoses_give_one_question_query_without_backend() {
        let mock = MockChatBackend::new(MockFixtures::default());
        let plan = generate_queries(&[], &location_question(), &mock, &TemplateSet::builtin(), 3, vec![]).unwrap();
        assert_eq!(plan.queries.len(), 1);
        assert!(plan.queries[0].starts_with("where is the affected area"));
        assert_eq!(mock.calls(), 0);
    }

    proptest! {
        #[test]
        fn bm25_equals_oracle(
            corpus in prop::collection::vec(prop::collection::vec(prop::sample::select(vec!["aa","bb","cc","dd","ee","ff"]), 1..8), 1..10),
            query in prop::collection::vec(prop::sample::select(vec!["aa","bb","cc","zz"]), 1..8),
        ) {
            let corpus: Vec<Vec<String>> = corpus.into_iter().map(|d| d.into_iter().map(String::from).collect()).collect();
            let query: Vec<String> = query.into_iter().map(String::from).collect();
            let index = KeywordIndex::build(corpus.iter().enumerate().map(|(i, d)| (format!("d{i}"), d.clone())), Bm25Params::default()).unwrap();
            for i in 0..corpus.len() {
                let got = index.bm25_score(&query, &format!("d{i}")).unwrap();
                let want = oracle_bm25(&corpus, &query, i, 1.5, 0.75);
                prop_assert!((got - want).abs() <= 1e-9);
            }
        }

        #[test]
        fn merge_never_duplicates(
            kw in prop::collection::vec(0u8..12, 0..6),
            dn in prop::collection::vec(0u8..12, 0..6),
        ) {
            let keyword: Vec<(String, f64)> = kw.iter().map(|i| (format!("d{i}"), 1.0)).collect();
            let dense: Vec<RetrievalCandidate> = dn.iter().map(|i| RetrievalCandidate {
                doc_id: format!("d{i}"), keyword_score: None, dense_score: Some(0.1), rerank_score: None, origin: Origin::Dense,
            }).collect();
            let merged = merge_candidates(&keyword, &dense);
            let ids: HashSet<&String> = merged.iter().map(|c| &c.doc_id).collect();
            prop_assert_eq!(ids.len(), merged.len());
            for c in &merged {
                let in_kw = keyword.iter().any(|k| k.0 == c.doc_id);
                let in_dn = dense.iter().any(|d| d.doc_id == c.doc_id);
                prop_assert!(in_kw || in_dn);
                prop_assert_eq!(c.origin == Origin::Both, in_kw && in_dn);
            }
        }
    }
}
