//! Pipeline commands. Each one reads its inputs from the configured paths
//! or earlier stage directories and writes its outputs plus a
//! `manifest.json` under `<output_dir>/<split>/<stage>/`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agents::{
    aggregate_findings, analyze_image, extract_clinical_context, extract_diagnoses, integrate_evidence,
    ClinicalContext, DiagnosisHypotheses, UnifiedFindings,
};
use crate::aggregation::{
    aggregate_predictions, consolidate, emit_submission, read_predictions, seed_material, write_predictions,
    AggregatedAnswer, PredictionRecord, SUBMISSION_CSV, SUBMISSION_JSON,
};
use crate::backends::{
    ChatBackend, ChatRequest, EmbeddingBackend, GenerationParams, HttpChatBackend, HttpEmbeddingBackend,
    HttpPairScorer, MockChatBackend, MockEmbedder, MockFixtures, MockPairScorer, PairScorer,
};
use crate::config::{PipelineConfig, MOCK_CLOCK};
use crate::dataset::{
    build_samples, filter_valid_images, load_annotations, load_batches, load_encounters, load_question_definitions,
    serialize_batches, AnnotationRecord, EncounterRecord, QuestionCatalog, QuestionFamily, Sample,
};
use crate::decision::{run_decision_loop, validate_answers, Advisory, Clock, LoopContext, TraceRecord};
use crate::error::{Error, Result};
use crate::evaluation::{
    agreement_csv, agreement_matrix, average_accuracy, policy_by_name, prediction_set, score_family, scores_csv,
    write_text, PredictionSet,
};
use crate::knowledge::{generate_queries, ingest_knowledge_base, should_retrieve, KnowledgeBase};
use crate::templates::TemplateSet;
use crate::text::sha256_hex;

pub const PREPROCESS: &str = "preprocess";
pub const BUILD_KB: &str = "kb";
pub const RUN: &str = "run";
pub const AGGREGATE: &str = "aggregate";
pub const EVALUATE: &str = "evaluate";
pub const AGREEMENT: &str = "agreement";

pub const MANIFEST: &str = "manifest.json";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const TRACES_JSONL: &str = "traces.jsonl";
pub const CHECKPOINT_JSONL: &str = "checkpoint.jsonl";
pub const SCORES_CSV: &str = "scores.csv";
pub const AGREEMENT_CSV: &str = "agreement.csv";
const INDEX_DIR: &str = "index";

/// Model name written on the pipeline's own prediction rows.
pub const MODEL_NAME: &str = "agentic-rag";
const GOLD_LABEL: &str = "ground-truth";
/// base_qid used on traces that belong to a whole encounter.
const ENCOUNTER_SCOPE: &str = "*";

/// Run record written next to every command's outputs. Contains no
/// timestamps so reruns produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub template_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub split: String,
    pub mock_backends: bool,
    pub counts: BTreeMap<String, Value>,
    /// Output file name to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    fn new(command: &str, config: &PipelineConfig, templates: &TemplateSet) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            template_version: templates.version().to_string(),
            config_hash: config.fingerprint(),
            seed: config.seed,
            split: config.split.clone(),
            mock_backends: config.mock_backends,
            counts: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn count(&mut self, key: &str, value: impl Serialize) {
        self.counts.insert(key.to_string(), json!(value));
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.outputs.insert(name, sha256_hex(&bytes));
        Ok(())
    }

    fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_text(&path, &(text + "\n"))?;
        Ok(path)
    }
}

fn templates_for(config: &PipelineConfig) -> Result<TemplateSet> {
    match &config.paths.templates_dir {
        Some(dir) => TemplateSet::load_dir(&config.resolve(dir)),
        None => Ok(TemplateSet::builtin()),
    }
}

fn catalog_for(config: &PipelineConfig) -> Result<QuestionCatalog> {
    QuestionCatalog::new(load_question_definitions(&config.resolve(&config.paths.definitions))?)
}

fn encounters_for(config: &PipelineConfig) -> Result<Vec<EncounterRecord>> {
    let images = config.paths.images_dir.as_ref().map(|d| config.resolve(d));
    load_encounters(&config.resolve(&config.paths.encounters), images.as_deref())
}

fn gold_for(config: &PipelineConfig) -> Result<Option<Vec<AnnotationRecord>>> {
    match &config.paths.annotations {
        Some(path) => {
            let path = config.resolve(path);
            if path.exists() {
                load_annotations(&path).map(Some)
            } else {
                Ok(None)
            }
        }
        None => Ok(None),
    }
}

/// Applies configured generation parameters to every request.
struct WithParams {
    inner: Arc<dyn ChatBackend>,
    params: GenerationParams,
}

impl ChatBackend for WithParams {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn chat(&self, request: &ChatRequest) -> Result<String> {
        let request = request.clone().with_params(self.params.clone());
        self.inner.chat(&request)
    }
}

/// The three model services a run needs.
#[derive(Clone)]
pub struct Backends {
    pub chat: Arc<dyn ChatBackend>,
    pub embedder: Arc<dyn EmbeddingBackend>,
    pub scorer: Arc<dyn PairScorer>,
}

impl Backends {
    pub fn from_config(config: &PipelineConfig) -> Result<Self> {
        if config.mock_backends {
            let path = config
                .paths
                .mock_fixtures
                .as_ref()
                .ok_or_else(|| Error::Config("mock backends need paths.mock_fixtures".into()))?;
            let fixtures = MockFixtures::load(&config.resolve(path))?;
            return Ok(Self {
                chat: Arc::new(MockChatBackend::new(fixtures)),
                embedder: Arc::new(MockEmbedder::new(config.seed)),
                scorer: Arc::new(MockPairScorer::new()),
            });
        }
        Ok(Self {
            chat: Arc::new(HttpChatBackend::new(config.backends.chat.clone())?),
            embedder: Arc::new(HttpEmbeddingBackend::new(config.backends.embedding.clone())?),
            scorer: Arc::new(HttpPairScorer::new(config.backends.reranker.clone())?),
        })
    }

    fn embedder_from_config(config: &PipelineConfig) -> Result<Arc<dyn EmbeddingBackend>> {
        if config.mock_backends {
            Ok(Arc::new(MockEmbedder::new(config.seed)))
        } else {
            Ok(Arc::new(HttpEmbeddingBackend::new(config.backends.embedding.clone())?))
        }
    }
}

/// Validates images, builds per-image samples and writes batch files.
pub fn cmd_preprocess(config: &PipelineConfig) -> Result<Manifest> {
    let templates = templates_for(config)?;
    let catalog = catalog_for(config)?;
    let encounters = encounters_for(config)?;
    let (kept, exclusions) = filter_valid_images(encounters);
    let gold = gold_for(config)?;
    let set = build_samples(&kept, gold.as_deref(), &catalog)?;

    let dir = config.stage_dir(PREPROCESS);
    let batches = serialize_batches(&set.samples, &dir, config.batch_size)?;
    let exclusions_path = dir.join("exclusions.json");
    write_text(
        &exclusions_path,
        &(serde_json::to_string_pretty(&exclusions).expect("exclusions serialize") + "\n"),
    )?;

    let mut manifest = Manifest::new("preprocess", config, &templates);
    let mut per_family: BTreeMap<&str, usize> = BTreeMap::new();
    for sample in &set.samples {
        *per_family.entry(&sample.base_qid).or_default() += 1;
    }
    manifest.count("encounters", kept.len());
    manifest.count("images", kept.iter().map(|e| e.image_ids.len()).sum::<usize>());
    manifest.count("excluded_images", exclusions.len());
    manifest.count("samples", set.samples.len());
    manifest.count("samples_per_family", &per_family);
    manifest.count("batches", batches.len());
    manifest.count("labelled", gold.is_some());
    manifest.count("warnings", &set.warnings);
    for path in batches.iter().chain([&exclusions_path]) {
        manifest.output(path)?;
    }
    manifest.write(&dir)?;
    Ok(manifest)
}

/// Ingests the knowledge base, embeds it and saves the index.
pub fn cmd_build_kb(config: &PipelineConfig) -> Result<Manifest> {
    let embedder = Backends::embedder_from_config(config)?;
    cmd_build_kb_with(config, embedder.as_ref())
}

pub fn cmd_build_kb_with(config: &PipelineConfig, embedder: &dyn EmbeddingBackend) -> Result<Manifest> {
    let templates = templates_for(config)?;
    let report = ingest_knowledge_base(&config.resolve(&config.paths.knowledge_base))?;
    let count = report.documents.len();
    let kb = KnowledgeBase::build(report.documents, embedder, config.bm25)?;
    let dir = config.stage_dir(BUILD_KB);
    let index_dir = dir.join(INDEX_DIR);
    kb.save(&index_dir)?;
    let mut manifest = Manifest::new("build-kb", config, &templates);
    manifest.count("documents", count);
    manifest.count("warnings", &report.warnings);
    for name in ["documents.jsonl", "embeddings.f32", "manifest.json"] {
        manifest.output(&index_dir.join(name))?;
    }
    manifest.write(&dir)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct EncounterContext {
    findings: UnifiedFindings,
    clinical: ClinicalContext,
    diagnoses: DiagnosisHypotheses,
    traces: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TaskResult {
    encounter_id: String,
    base_qid: String,
    answers: Vec<String>,
    retrieval_calls: usize,
    backend_calls: usize,
    revised: bool,
    reflected: bool,
    degraded: bool,
    traces: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CheckpointEntry {
    Header {
        config_hash: String,
        template_version: String,
    },
    Context {
        encounter_id: String,
        context: Box<EncounterContext>,
    },
    Task(TaskResult),
}

#[derive(Default)]
struct Checkpoint {
    contexts: BTreeMap<String, EncounterContext>,
    tasks: BTreeMap<(String, String), TaskResult>,
}

fn read_checkpoint(path: &Path, config_hash: &str, template_version: &str) -> Result<Checkpoint> {
    let mut checkpoint = Checkpoint::default();
    if !path.exists() {
        return Ok(checkpoint);
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut matched = false;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CheckpointEntry = match serde_json::from_str(&line) {
            Ok(entry) => entry,
            Err(e) => {
                log::warn!("ignoring unreadable checkpoint line {}: {e}", n + 1);
                continue;
            }
        };
        match entry {
            CheckpointEntry::Header {
                config_hash: h,
                template_version: t,
            } => {
                matched = h == config_hash && t == template_version;
                if !matched {
                    log::warn!("checkpoint was written with a different config; starting over");
                    return Ok(Checkpoint::default());
                }
            }
            _ if !matched => return Ok(Checkpoint::default()),
            CheckpointEntry::Context { encounter_id, context } => {
                checkpoint.contexts.insert(encounter_id, *context);
            }
            CheckpointEntry::Task(task) => {
                checkpoint
                    .tasks
                    .insert((task.encounter_id.clone(), task.base_qid.clone()), task);
            }
        }
    }
    Ok(checkpoint)
}

/// Append-only checkpoint writer shared by workers.
struct CheckpointSink {
    path: PathBuf,
    writer: Mutex<BufWriter<fs::File>>,
}

impl CheckpointSink {
    fn open(path: &Path, fresh: bool, header: &CheckpointEntry) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let torn = !fresh
            && fs::read(path)
                .map_err(|e| Error::io(path, e))?
                .last()
                .is_some_and(|&b| b != b'\n');
        let sink = Self {
            path: path.to_path_buf(),
            writer: Mutex::new(BufWriter::new(file)),
        };
        if fresh {
            sink.append(header)?;
        } else if torn {
            // Terminate a line cut short by a crash so the next entry starts clean.
            let mut writer = sink.writer.lock().expect("checkpoint lock poisoned");
            writeln!(writer).map_err(|e| Error::io(path, e))?;
        }
        Ok(sink)
    }

    fn append(&self, entry: &CheckpointEntry) -> Result<()> {
        let line = serde_json::to_string(entry).expect("checkpoint entry serializes");
        let mut writer = self.writer.lock().expect("checkpoint lock poisoned");
        writeln!(writer, "{line}").map_err(|e| Error::io(&self.path, e))?;
        writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Consolidated advisory answers per (encounter, family), per model.
type AdvisoryTable = BTreeMap<(String, String), Advisory>;

fn validated_records(records: Vec<PredictionRecord>, catalog: &QuestionCatalog) -> Vec<PredictionRecord> {
    records
        .into_iter()
        .filter_map(|mut r| {
            let Some(family) = catalog.family(&r.base_qid) else {
                log::warn!("ignoring prediction for unknown family {}", r.base_qid);
                return None;
            };
            r.answers = validate_answers(&r.answers, family.options()).answers;
            Some(r)
        })
        .collect()
}

fn load_advisory(config: &PipelineConfig, catalog: &QuestionCatalog) -> Result<(AdvisoryTable, Vec<String>)> {
    let mut by_model: BTreeMap<String, Vec<PredictionRecord>> = BTreeMap::new();
    for path in &config.paths.advisory {
        let records = read_predictions(&config.resolve(path))?;
        for record in validated_records(records, catalog) {
            by_model.entry(record.model_name.clone()).or_default().push(record);
        }
    }
    let mut table = AdvisoryTable::new();
    for (model, records) in &by_model {
        let mut groups: BTreeMap<(String, String), Vec<PredictionRecord>> = BTreeMap::new();
        for r in records {
            groups
                .entry((r.encounter_id.clone(), r.base_qid.clone()))
                .or_default()
                .push(r.clone());
        }
        for ((encounter, family), group) in groups {
            let max = catalog.family(&family).map_or(1, QuestionFamily::max_answers);
            let answers = consolidate(&group, max, seed_material(config.seed, &encounter, &family))?;
            table
                .entry((encounter, family))
                .or_default()
                .insert(model.clone(), answers);
        }
    }
    Ok((table, by_model.into_keys().collect()))
}

/// Summary of a completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub manifest: Manifest,
    pub decisions: usize,
    /// Retrieval searches executed, per family.
    pub retrieval_calls: BTreeMap<String, usize>,
}

struct RunInputs<'a> {
    config: &'a PipelineConfig,
    kb: &'a KnowledgeBase,
    templates: &'a TemplateSet,
    backends: &'a Backends,
    clock: &'a Clock,
    advisory: &'a AdvisoryTable,
}

fn trace(encounter_id: &str, base_qid: &str, stage: &str, payload: Value, clock: &Clock) -> TraceRecord {
    TraceRecord {
        encounter_id: encounter_id.to_string(),
        base_qid: base_qid.to_string(),
        stage: stage.to_string(),
        payload,
        timestamp: clock.now(),
    }
}

fn build_context(inputs: &RunInputs<'_>, encounter: &EncounterRecord, images: &[String]) -> Result<EncounterContext> {
    let chat = inputs.backends.chat.as_ref();
    let id = &encounter.encounter_id;
    let clock = inputs.clock;
    let mut traces = Vec::new();
    let mut per_image = Vec::with_capacity(images.len());
    for image in images {
        let path = Path::new(image);
        let file_name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| image.clone());
        let findings = analyze_image(path, chat, inputs.templates, vec![file_name, id.clone()])?;
        traces.push(trace(id, ENCOUNTER_SCOPE, "image_analysis", json!(findings), clock));
        per_image.push(findings);
    }
    let findings = aggregate_findings(&per_image)?;
    traces.push(trace(
        id,
        ENCOUNTER_SCOPE,
        "findings_aggregation",
        json!(findings),
        clock,
    ));
    let clinical = extract_clinical_context(
        &encounter.query_title,
        &encounter.query_content,
        chat,
        inputs.templates,
        vec![id.clone()],
    )?;
    traces.push(trace(id, ENCOUNTER_SCOPE, "clinical_context", json!(clinical), clock));
    let diagnoses = extract_diagnoses(&findings, &clinical, chat, inputs.templates, vec![id.clone()])?;
    traces.push(trace(id, ENCOUNTER_SCOPE, "diagnosis", json!(diagnoses), clock));
    Ok(EncounterContext {
        findings,
        clinical,
        diagnoses,
        traces,
    })
}

fn run_task(
    inputs: &RunInputs<'_>,
    encounter_id: &str,
    family: &QuestionFamily,
    context: &EncounterContext,
) -> Result<TaskResult> {
    let config = inputs.config;
    let chat = inputs.backends.chat.as_ref();
    let lead = family.lead();
    let base = family.base_qid.as_str();
    let keys = vec![
        format!("{encounter_id}/{base}"),
        base.to_string(),
        encounter_id.to_string(),
    ];
    let clock = inputs.clock;
    let mut traces = Vec::new();

    let retrieve = should_retrieve(&lead.question_type, base, &config.gating);
    let mut passages = Vec::new();
    let mut retrieval_calls = 0;
    let mut degraded = context.diagnoses.degraded;
    if retrieve {
        let plan = generate_queries(
            &context.diagnoses.names(),
            lead,
            chat,
            inputs.templates,
            config.max_queries,
            keys.clone(),
        )?;
        degraded |= plan.degraded;
        let mut seen = BTreeSet::new();
        let mut results = Vec::new();
        for query in &plan.queries {
            let hybrid = inputs
                .kb
                .hybrid_search(query, config.k_each, inputs.backends.embedder.as_ref());
            let reranked =
                inputs
                    .kb
                    .rerank(query, &hybrid.candidates, inputs.backends.scorer.as_ref(), config.top_k)?;
            retrieval_calls += 1;
            degraded |= hybrid.degraded || reranked.degraded;
            for candidate in &reranked.candidates {
                if seen.insert(candidate.doc_id.clone()) {
                    if let Some(doc) = inputs.kb.document(&candidate.doc_id) {
                        passages.push(format!("{}: {}", doc.title, doc.body));
                    }
                }
            }
            results.push(json!({
                "query": query,
                "dense_degraded": hybrid.degraded,
                "rerank_degraded": reranked.degraded,
                "candidates": reranked.candidates,
            }));
        }
        traces.push(trace(
            encounter_id,
            base,
            "retrieval",
            json!({"invoked": true, "queries": plan.queries, "fallback": plan.fallback, "results": results}),
            clock,
        ));
    } else {
        traces.push(trace(
            encounter_id,
            base,
            "retrieval",
            json!({"invoked": false, "reason": "gated"}),
            clock,
        ));
    }

    let bundle = integrate_evidence(
        &context.findings,
        &context.clinical,
        &passages,
        lead,
        &config.weights,
        chat,
        inputs.templates,
        keys.clone(),
    )?;
    traces.push(trace(
        encounter_id,
        base,
        "evidence_integration",
        json!({"weights": bundle.weights, "passages": bundle.passages.len(), "notes": bundle.concordance_notes}),
        clock,
    ));

    let advisory = inputs
        .advisory
        .get(&(encounter_id.to_string(), base.to_string()))
        .cloned()
        .unwrap_or_default();
    let ctx = LoopContext {
        encounter_id,
        fixture_keys: keys,
        clock,
        templates: inputs.templates,
    };
    let outcome = run_decision_loop(
        lead,
        family.max_answers(),
        &bundle,
        &advisory,
        config.threshold,
        chat,
        &ctx,
    )?;
    traces.extend(outcome.traces);
    Ok(TaskResult {
        encounter_id: encounter_id.to_string(),
        base_qid: base.to_string(),
        answers: outcome.decision.answers,
        retrieval_calls,
        backend_calls: outcome.backend_calls,
        revised: outcome.decision.revised,
        reflected: outcome.verdict.triggered,
        degraded: degraded || outcome.decision.degraded || outcome.verdict.degraded,
        traces,
    })
}

/// Images per encounter, in sample order.
fn images_by_encounter(samples: &[Sample]) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for s in samples {
        let images = out.entry(s.encounter_id.clone()).or_default();
        if !images.contains(&s.image_path) {
            images.push(s.image_path.clone());
        }
    }
    out
}

/// Runs the agent pipeline with backends built from the config.
pub fn cmd_run(config: &PipelineConfig) -> Result<RunReport> {
    cmd_run_with(config, &Backends::from_config(config)?)
}

/// Runs every (encounter, family) task not already in the checkpoint.
/// Backend exhaustion stops the run with [`Error::PartialRun`]; rerunning
/// resumes from the checkpoint.
pub fn cmd_run_with(config: &PipelineConfig, backends: &Backends) -> Result<RunReport> {
    let templates = templates_for(config)?;
    let catalog = catalog_for(config)?;
    let samples = load_batches(&config.stage_dir(PREPROCESS))
        .map_err(|e| Error::Config(format!("no preprocessed batches ({e}); run preprocess first")))?;
    if samples.is_empty() {
        return Err(Error::Config("no preprocessed samples; run preprocess first".into()));
    }
    let index_dir = config.stage_dir(BUILD_KB).join(INDEX_DIR);
    let kb = KnowledgeBase::load(&index_dir, config.bm25).map_err(|e| {
        Error::Config(format!(
            "no knowledge index at {} ({e}); run build-kb first",
            index_dir.display()
        ))
    })?;
    let encounters: BTreeMap<String, EncounterRecord> = encounters_for(config)?
        .into_iter()
        .map(|e| (e.encounter_id.clone(), e))
        .collect();
    let images = images_by_encounter(&samples);
    let (advisory, _) = load_advisory(config, &catalog)?;
    let clock = if config.mock_backends {
        Clock::Fixed(MOCK_CLOCK.to_string())
    } else {
        Clock::System
    };
    let chat: Arc<dyn ChatBackend> = Arc::new(WithParams {
        inner: backends.chat.clone(),
        params: config.generation.clone(),
    });
    let backends = Backends {
        chat,
        embedder: backends.embedder.clone(),
        scorer: backends.scorer.clone(),
    };
    let inputs = RunInputs {
        config,
        kb: &kb,
        templates: &templates,
        backends: &backends,
        clock: &clock,
        advisory: &advisory,
    };

    let dir = config.stage_dir(RUN);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let checkpoint_path = dir.join(CHECKPOINT_JSONL);
    let config_hash = config.fingerprint();
    let mut checkpoint = read_checkpoint(&checkpoint_path, &config_hash, templates.version())?;
    let fresh = checkpoint.contexts.is_empty() && checkpoint.tasks.is_empty();
    let header = CheckpointEntry::Header {
        config_hash: config_hash.clone(),
        template_version: templates.version().to_string(),
    };
    let sink = CheckpointSink::open(&checkpoint_path, fresh, &header)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let abort = AtomicBool::new(false);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let record_failure = |e: Error| {
        abort.store(true, Ordering::SeqCst);
        let mut slot = failure.lock().expect("failure lock poisoned");
        if slot.is_none() {
            *slot = Some(e);
        }
    };

    // Encounter-level context first; every family of an encounter shares it.
    let pending: Vec<&String> = images
        .keys()
        .filter(|id| !checkpoint.contexts.contains_key(*id))
        .collect();
    let built: Vec<(String, EncounterContext)> = pool.install(|| {
        pending
            .par_iter()
            .filter_map(|id| {
                if abort.load(Ordering::SeqCst) {
                    return None;
                }
                let Some(encounter) = encounters.get(*id) else {
                    record_failure(Error::Integrity(format!(
                        "{id} is in the batches but not the encounter file"
                    )));
                    return None;
                };
                match build_context(&inputs, encounter, &images[*id]) {
                    Ok(context) => {
                        // Degraded work is used for this run's outputs but
                        // left out of the checkpoint so the next run retries it.
                        if !context.diagnoses.degraded {
                            let entry = CheckpointEntry::Context {
                                encounter_id: (*id).clone(),
                                context: Box::new(context.clone()),
                            };
                            if let Err(e) = sink.append(&entry) {
                                record_failure(e);
                            }
                        }
                        Some(((*id).clone(), context))
                    }
                    Err(e) => {
                        record_failure(e);
                        None
                    }
                }
            })
            .collect()
    });
    checkpoint.contexts.extend(built);

    let families: Vec<&QuestionFamily> = catalog.families().collect();
    let all_tasks: Vec<(String, &QuestionFamily)> = images
        .keys()
        .flat_map(|id| families.iter().map(move |f| (id.clone(), *f)))
        .collect();
    let total = all_tasks.len();
    let todo: Vec<&(String, &QuestionFamily)> = all_tasks
        .iter()
        .filter(|(id, f)| !checkpoint.tasks.contains_key(&(id.clone(), f.base_qid.clone())))
        .filter(|(id, _)| checkpoint.contexts.contains_key(id))
        .collect();
    let finished: Vec<TaskResult> = pool.install(|| {
        todo.par_iter()
            .filter_map(|(id, family)| {
                if abort.load(Ordering::SeqCst) {
                    return None;
                }
                match run_task(&inputs, id, family, &checkpoint.contexts[id]) {
                    Ok(result) if result.degraded => Some(result),
                    Ok(result) => match sink.append(&CheckpointEntry::Task(result.clone())) {
                        Ok(()) => Some(result),
                        Err(e) => {
                            record_failure(e);
                            None
                        }
                    },
                    Err(e) => {
                        record_failure(e);
                        None
                    }
                }
            })
            .collect()
    });
    for result in finished {
        checkpoint
            .tasks
            .insert((result.encounter_id.clone(), result.base_qid.clone()), result);
    }

    if let Some(error) = failure.into_inner().expect("failure lock poisoned") {
        return Err(match error {
            Error::Backend { .. } => Error::PartialRun {
                completed: checkpoint.tasks.len(),
                total,
                cause: error.to_string(),
            },
            other => other,
        });
    }

    // Assemble sorted outputs from the checkpoint so resumed and
    // uninterrupted runs write the same bytes.
    let mut predictions = Vec::new();
    let mut traces: Vec<&TraceRecord> = Vec::new();
    let mut retrieval_calls: BTreeMap<String, usize> = families.iter().map(|f| (f.base_qid.clone(), 0)).collect();
    let (mut revised, mut reflected, mut degraded, mut calls) = (0, 0, 0, 0);
    for (id, context) in &checkpoint.contexts {
        if !images.contains_key(id) {
            continue;
        }
        traces.extend(&context.traces);
        for family in &families {
            let task = &checkpoint.tasks[&(id.clone(), family.base_qid.clone())];
            traces.extend(&task.traces);
            *retrieval_calls.get_mut(&family.base_qid).expect("family counted") += task.retrieval_calls;
            revised += usize::from(task.revised);
            reflected += usize::from(task.reflected);
            degraded += usize::from(task.degraded);
            calls += task.backend_calls;
            for image in &images[id] {
                predictions.push(PredictionRecord {
                    encounter_id: id.clone(),
                    base_qid: family.base_qid.clone(),
                    image_path: image.clone(),
                    model_name: MODEL_NAME.to_string(),
                    answers: task.answers.clone(),
                });
            }
        }
    }
    predictions.sort_by(|a, b| {
        (&a.encounter_id, &a.base_qid, &a.image_path).cmp(&(&b.encounter_id, &b.base_qid, &b.image_path))
    });
    let predictions_path = dir.join(PREDICTIONS_CSV);
    write_predictions(&predictions_path, &predictions)?;
    let traces_path = dir.join(TRACES_JSONL);
    let mut text = String::new();
    for record in &traces {
        text.push_str(&serde_json::to_string(record).expect("trace serializes"));
        text.push('\n');
    }
    write_text(&traces_path, &text)?;

    let mut manifest = Manifest::new("run", config, &templates);
    manifest.count("encounters", images.len());
    manifest.count("decisions", total);
    manifest.count("prediction_rows", predictions.len());
    manifest.count("decision_backend_calls", calls);
    manifest.count("reflections", reflected);
    manifest.count("revisions", revised);
    manifest.count("degraded", degraded);
    manifest.count("retrieval_calls", &retrieval_calls);
    manifest.output(&predictions_path)?;
    manifest.output(&traces_path)?;
    manifest.write(&dir)?;
    Ok(RunReport {
        manifest,
        decisions: total,
        retrieval_calls,
    })
}

fn batch_encounters(config: &PipelineConfig) -> Result<BTreeSet<String>> {
    Ok(load_batches(&config.stage_dir(PREPROCESS))?
        .into_iter()
        .map(|s| s.encounter_id)
        .collect())
}

/// Consolidates run predictions into the submission files.
pub fn cmd_aggregate(config: &PipelineConfig) -> Result<Manifest> {
    let templates = templates_for(config)?;
    let catalog = catalog_for(config)?;
    let predictions_path = config.stage_dir(RUN).join(PREDICTIONS_CSV);
    let records = validated_records(read_predictions(&predictions_path)?, &catalog);
    let aggregated = aggregate_predictions(&records, &catalog, config.seed)?;
    let expected = batch_encounters(config).unwrap_or_default();
    let present: BTreeSet<&String> = aggregated.iter().map(|a| &a.encounter_id).collect();
    let missing: Vec<String> = expected.iter().filter(|e| !present.contains(e)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::Completeness { missing });
    }
    let dir = config.stage_dir(AGGREGATE);
    let files = emit_submission(&aggregated, &catalog, &dir)?;
    let mut manifest = Manifest::new("aggregate", config, &templates);
    manifest.count("encounters", present.len());
    manifest.count("families", aggregated.len());
    manifest.count("prediction_rows", records.len());
    manifest.output(&files.json)?;
    manifest.output(&files.csv)?;
    manifest.write(&dir)?;
    Ok(manifest)
}

fn submission(config: &PipelineConfig) -> Result<Vec<AnnotationRecord>> {
    load_annotations(&config.stage_dir(AGGREGATE).join(SUBMISSION_JSON))
}

fn require_gold(config: &PipelineConfig) -> Result<Vec<AnnotationRecord>> {
    gold_for(config)?.ok_or_else(|| Error::Config(format!("split {} has no gold annotations", config.split)))
}

/// Per-family accuracy of the submission against gold.
pub fn cmd_evaluate(config: &PipelineConfig) -> Result<Manifest> {
    let templates = templates_for(config)?;
    let catalog = catalog_for(config)?;
    let policy = policy_by_name(&config.scoring_policy)?;
    let predicted = submission(config)?;
    let gold = require_gold(config)?;
    let scores = catalog
        .families()
        .map(|f| score_family(&predicted, &gold, f, policy.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let dir = config.stage_dir(EVALUATE);
    let path = dir.join(SCORES_CSV);
    write_text(&path, &scores_csv(&scores))?;
    let mut manifest = Manifest::new("evaluate", config, &templates);
    manifest.count("policy", policy.name());
    manifest.count("families", scores.len());
    if let Ok(avg) = average_accuracy(&scores) {
        manifest.count("average_accuracy", format!("{avg:.4}"));
    }
    manifest.output(&path)?;
    manifest.write(&dir)?;
    Ok(manifest)
}

fn aggregated_set(aggregated: &[AggregatedAnswer]) -> PredictionSet {
    aggregated
        .iter()
        .flat_map(|a| {
            a.slot_indices
                .iter()
                .map(|(qid, index)| ((a.encounter_id.clone(), qid.clone()), vec![*index]))
        })
        .collect()
}

/// Pairwise slot-level agreement between gold (when present), the
/// pipeline's submission and each advisory model.
pub fn cmd_agreement(config: &PipelineConfig) -> Result<Manifest> {
    let templates = templates_for(config)?;
    let catalog = catalog_for(config)?;
    let mut sets: Vec<(String, PredictionSet)> = Vec::new();
    if let Some(gold) = gold_for(config)? {
        sets.push((GOLD_LABEL.to_string(), prediction_set(&gold)));
    }
    sets.push((MODEL_NAME.to_string(), prediction_set(&submission(config)?)));
    let mut by_model: BTreeMap<String, Vec<PredictionRecord>> = BTreeMap::new();
    for path in &config.paths.advisory {
        for record in validated_records(read_predictions(&config.resolve(path))?, &catalog) {
            by_model.entry(record.model_name.clone()).or_default().push(record);
        }
    }
    for (model, records) in by_model {
        sets.push((
            model,
            aggregated_set(&aggregate_predictions(&records, &catalog, config.seed)?),
        ));
    }
    let matrix = agreement_matrix(&sets)?;
    let dir = config.stage_dir(AGREEMENT);
    let path = dir.join(AGREEMENT_CSV);
    write_text(&path, &agreement_csv(&matrix))?;
    let mut manifest = Manifest::new("agreement", config, &templates);
    manifest.count("models", &matrix.labels);
    manifest.count("keys", sets[0].1.len());
    manifest.output(&path)?;
    manifest.write(&dir)?;
    Ok(manifest)
}

/// Files compared for end-to-end reproducibility.
pub fn final_outputs(config: &PipelineConfig) -> Vec<PathBuf> {
    vec![
        config.stage_dir(AGGREGATE).join(SUBMISSION_JSON),
        config.stage_dir(AGGREGATE).join(SUBMISSION_CSV),
        config.stage_dir(EVALUATE).join(SCORES_CSV),
        config.stage_dir(AGREEMENT).join(AGREEMENT_CSV),
    ]
}
