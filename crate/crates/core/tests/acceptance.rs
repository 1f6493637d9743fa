//! Acceptance checks. Run with `cargo test -p dermqa --test acceptance`.
//! Prints one PASS/FAIL line per criterion and exits non-zero on failure.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::time::{Duration, Instant};

use dermqa::agents::{ClinicalContext, EvidenceBundle, EvidenceWeights, UnifiedFindings};
use dermqa::aggregation::{aggregate_group, consolidate, PredictionRecord};
use dermqa::backends::{EmbeddingBackend, EmbeddingVector, MockChatBackend, MockEmbedder, MockFixtures, EMBEDDING_DIM};
use dermqa::config::{Overrides, PipelineConfig};
use dermqa::dataset::{
    build_samples, canonicalize_family_answers, clean_answer_text, load_batches, serialize_batches, EncounterRecord,
    QuestionCatalog, NOT_MENTIONED,
};
use dermqa::decision::{run_decision_loop, Clock, LoopContext};
use dermqa::evaluation::{average_accuracy, FamilyScore};
use dermqa::knowledge::{dense_search, Bm25Params, DenseIndex, KeywordIndex, KnowledgeBase, KnowledgeDocument};
use dermqa::pipeline::{self, Backends};
use dermqa::templates::{TemplateSet, REANALYSIS, REASONING, REFLECTION};
use dermqa::text::tokenize;
use dermqa::{synthetic, Error};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check, Duration);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

const FAMILY_ORDER: [&str; 9] = [
    "CQID010", "CQID011", "CQID012", "CQID015", "CQID020", "CQID025", "CQID034", "CQID035", "CQID036",
];

fn ac1_table_arithmetic() -> Check {
    // (column, per-family accuracies in FAMILY_ORDER, printed average)
    let columns: [(&str, [f64; 9], f64); 10] = [
        (
            "base/valid/vlm",
            [0.4821, 0.8333, 0.6086, 0.7679, 0.5708, 0.8929, 0.4643, 0.8750, 0.5536],
            0.6721,
        ),
        (
            "base/valid/reasoning",
            [0.5714, 0.9048, 0.7083, 0.8929, 0.5653, 0.8036, 0.4286, 0.8929, 0.6429],
            0.7123,
        ),
        (
            "base/valid/agentic",
            [0.5357, 0.8762, 0.7009, 0.8571, 0.5771, 0.8036, 0.3929, 0.8214, 0.6429],
            0.6898,
        ),
        (
            "base/test/vlm",
            [0.31, 0.3847, 0.5317, 0.31, 0.3122, 0.42, 0.01, 0.72, 0.37],
            0.3743,
        ),
        (
            "base/test/reasoning",
            [0.51, 0.8403, 0.6967, 0.85, 0.5587, 0.87, 0.55, 0.81, 0.67],
            0.7062,
        ),
        (
            "base/test/agentic",
            [0.47, 0.8552, 0.69, 0.85, 0.5561, 0.84, 0.51, 0.82, 0.64],
            0.6924,
        ),
        (
            "ft/valid/reasoning",
            [0.6071, 0.8777, 0.6815, 0.8214, 0.5821, 0.8214, 0.4643, 0.8929, 0.6071],
            0.7062,
        ),
        (
            "ft/valid/agentic",
            [0.5536, 0.8795, 0.7173, 0.8214, 0.5421, 0.8036, 0.3929, 0.8393, 0.6071],
            0.6841,
        ),
        (
            "ft/test/reasoning",
            [0.53, 0.8683, 0.6625, 0.81, 0.5649, 0.89, 0.60, 0.81, 0.65],
            0.7095,
        ),
        (
            "ft/test/agentic",
            [0.44, 0.8363, 0.6858, 0.78, 0.5544, 0.86, 0.48, 0.79, 0.65],
            0.6752,
        ),
    ];
    let mut worst: f64 = 0.0;
    for (name, values, printed) in columns {
        let scores: Vec<FamilyScore> = FAMILY_ORDER
            .iter()
            .zip(values)
            .map(|(f, accuracy)| FamilyScore {
                base_qid: f.to_string(),
                accuracy,
                n: 1,
            })
            .collect();
        let avg = average_accuracy(&scores).map_err(fail)?;
        let delta = (avg - printed).abs();
        worst = worst.max(delta);
        ensure(delta <= 0.0005, || format!("{name}: {avg:.6} vs printed {printed}"))?;
    }
    Ok(format!("10 columns, max |delta| {worst:.6}"))
}

/// Brute-force Okapi BM25, written independently of the engine.
fn oracle_bm25(corpus: &[(String, Vec<String>)], query: &[String], doc: usize, k1: f64, b: f64) -> f64 {
    let n = corpus.len() as f64;
    let avgdl = corpus.iter().map(|(_, t)| t.len() as f64).sum::<f64>() / n;
    let dl = corpus[doc].1.len() as f64;
    let mut total = 0.0;
    for term in query {
        let df = corpus.iter().filter(|(_, t)| t.contains(term)).count() as f64;
        let tf = corpus[doc].1.iter().filter(|t| *t == term).count() as f64;
        if tf == 0.0 {
            continue;
        }
        let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
        let norm = if avgdl > 0.0 { dl / avgdl } else { 0.0 };
        total += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm));
    }
    total
}

fn ac2_bm25_oracle() -> Check {
    let vocab: Vec<String> = (0..12).map(|i| format!("t{i}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut compared = 0;
    let mut worst: f64 = 0.0;
    for corpus_no in 0..20 {
        let docs = rng.random_range(1..=10);
        let corpus: Vec<(String, Vec<String>)> = (0..docs)
            .map(|d| {
                let len = rng.random_range(1..=15);
                let tokens = (0..len).map(|_| vocab.choose(&mut rng).unwrap().clone()).collect();
                (format!("d{d:02}"), tokens)
            })
            .collect();
        let params = Bm25Params::default();
        let index = KeywordIndex::build(corpus.clone(), params).map_err(fail)?;
        for _ in 0..5 {
            let qlen = rng.random_range(1..=8);
            let query: Vec<String> = (0..qlen).map(|_| vocab.choose(&mut rng).unwrap().clone()).collect();
            for (i, (id, _)) in corpus.iter().enumerate() {
                let got = index.bm25_score(&query, id).map_err(fail)?;
                let want = oracle_bm25(&corpus, &query, i, params.k1, params.b);
                let delta = (got - want).abs();
                worst = worst.max(delta);
                ensure(delta <= 1e-9, || {
                    format!("corpus {corpus_no} doc {id}: {got} vs oracle {want}")
                })?;
                compared += 1;
            }
        }
    }
    Ok(format!("{compared} scores, max |delta| {worst:.2e}"))
}

fn random_unit(rng: &mut ChaCha8Rng) -> EmbeddingVector {
    let raw: Vec<f32> = (0..EMBEDDING_DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    EmbeddingVector::normalized(raw).expect("non-zero vector")
}

fn ac3_dense_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ties_seen = 0;
    for corpus_no in 0..50 {
        let n = rng.random_range(1..=64);
        // Draw from a small pool so identical vectors force score ties.
        let pool: Vec<EmbeddingVector> = (0..rng.random_range(1..=n)).map(|_| random_unit(&mut rng)).collect();
        let mut ids: Vec<String> = (0..n).map(|i| format!("doc-{i:03}")).collect();
        ids.shuffle(&mut rng);
        let entries: Vec<(String, EmbeddingVector)> = ids
            .into_iter()
            .map(|id| (id, pool.choose(&mut rng).unwrap().clone()))
            .collect();
        let index = DenseIndex::new(entries.clone());
        let query = random_unit(&mut rng);
        let k = rng.random_range(1..=n + 3);

        let mut oracle: Vec<(String, f64)> = entries
            .iter()
            .map(|(id, v)| {
                let dot: f64 = query
                    .as_slice()
                    .iter()
                    .zip(v.as_slice())
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                (id.clone(), dot)
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        ties_seen += oracle.windows(2).filter(|w| w[0].1 == w[1].1).count();
        oracle.truncate(k);

        let got: Vec<String> = dense_search(&query, &index, k).into_iter().map(|c| c.doc_id).collect();
        let want: Vec<String> = oracle.into_iter().map(|(id, _)| id).collect();
        ensure(got == want, || {
            format!("corpus {corpus_no}: {got:?} vs oracle {want:?}")
        })?;
    }
    ensure(ties_seen > 0, || "fixtures produced no ties".into())?;
    Ok(format!("50 corpora, {ties_seen} tied neighbours exercised"))
}

fn ac4_hybrid_dedup() -> Check {
    let vocab = [
        "eczema",
        "psoriasis",
        "itch",
        "scale",
        "plaque",
        "red",
        "arm",
        "leg",
        "chronic",
        "acute",
        "blister",
        "crust",
        "fungal",
        "ring",
        "nail",
        "scalp",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let embedder = MockEmbedder::new(4);
    let mut emitted = 0;
    for fixture in 0..200 {
        let docs: Vec<KnowledgeDocument> = (0..rng.random_range(1..=12))
            .map(|i| {
                let words = |rng: &mut ChaCha8Rng, n| {
                    (0..n)
                        .map(|_| *vocab.choose(rng).unwrap())
                        .collect::<Vec<_>>()
                        .join(" ")
                };
                KnowledgeDocument {
                    doc_id: format!("kb-{i:03}"),
                    title: words(&mut rng, 2),
                    body: words(&mut rng, 12),
                    source_tag: "fixture".into(),
                }
            })
            .collect();
        let kb = KnowledgeBase::build(docs, &embedder, Bm25Params::default()).map_err(fail)?;
        let query = (0..rng.random_range(1..=6))
            .map(|_| *vocab.choose(&mut rng).unwrap())
            .collect::<Vec<_>>()
            .join(" ");
        let k = rng.random_range(1..=6);
        let result = kb.hybrid_search(&query, k, &embedder);

        let keyword: BTreeSet<String> = kb
            .keyword_index()
            .search(&tokenize(&query), k)
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        let qv = embedder.embed(std::slice::from_ref(&query)).map_err(fail)?.remove(0);
        let dense: BTreeSet<String> = dense_search(&qv, kb.dense_index(), k)
            .into_iter()
            .map(|c| c.doc_id)
            .collect();

        let mut seen = BTreeSet::new();
        for c in &result.candidates {
            ensure(seen.insert(c.doc_id.clone()), || {
                format!("fixture {fixture}: duplicate {}", c.doc_id)
            })?;
            ensure(keyword.contains(&c.doc_id) || dense.contains(&c.doc_id), || {
                format!("fixture {fixture}: {} came from neither channel", c.doc_id)
            })?;
        }
        let union: BTreeSet<String> = keyword.union(&dense).cloned().collect();
        ensure(seen == union, || {
            format!("fixture {fixture}: emitted {seen:?}, channels gave {union:?}")
        })?;
        emitted += result.candidates.len();
    }
    Ok(format!("200 fixtures, {emitted} candidates, no duplicates"))
}

fn record(answers: &[&str]) -> PredictionRecord {
    PredictionRecord {
        encounter_id: "ENC00001".into(),
        base_qid: "CQID034".into(),
        image_path: String::new(),
        model_name: "m".into(),
        answers: answers.iter().map(|s| s.to_string()).collect(),
    }
}

fn ac5_consolidation_determinism() -> Check {
    let fixtures: Vec<(Vec<PredictionRecord>, usize)> = vec![
        (vec![record(&["red"]), record(&["pink"]), record(&["brown"])], 1),
        (
            vec![
                record(&["red", "pink"]),
                record(&["brown", "white"]),
                record(&["black", "blue"]),
            ],
            2,
        ),
        (vec![record(&["a", "b", "c", "d"]), record(&["e", "f", "g", "h"])], 3),
        (
            vec![
                record(&["red", "pink"]),
                record(&["pink", "red"]),
                record(&["white"]),
                record(&["blue"]),
            ],
            3,
        ),
        (
            vec![
                record(&["x"]),
                record(&["y"]),
                record(&["z"]),
                record(&["w"]),
                record(&[NOT_MENTIONED]),
            ],
            2,
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut runs = 0;
    for (i, (records, max)) in fixtures.iter().enumerate() {
        let seed = 0x5eed_u64 ^ i as u64;
        let reference = consolidate(records, *max, seed).map_err(fail)?;
        for _ in 0..100 {
            ensure(consolidate(records, *max, seed).map_err(fail)? == reference, || {
                format!("fixture {i}: repeated run differs")
            })?;
            let mut shuffled = records.clone();
            shuffled.shuffle(&mut rng);
            for r in &mut shuffled {
                r.answers.shuffle(&mut rng);
            }
            let permuted = consolidate(&shuffled, *max, seed).map_err(fail)?;
            ensure(permuted == reference, || {
                format!("fixture {i}: permutation gave {permuted:?} vs {reference:?}")
            })?;
            runs += 2;
        }
    }
    Ok(format!("{runs} runs over {} tie-heavy fixtures", fixtures.len()))
}

fn ac6_answer_limits() -> Check {
    let catalog = QuestionCatalog::new(synthetic::question_definitions()).map_err(fail)?;
    let families: Vec<_> = catalog.families().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut color_cases = 0;
    for case in 0..10_000 {
        let family = families[case % families.len()];
        let options = family.options();
        let records: Vec<PredictionRecord> = (0..rng.random_range(1..=5))
            .map(|i| {
                let n = rng.random_range(1..=options.len().min(8));
                let answers = options.choose_multiple(&mut rng, n).cloned().collect();
                PredictionRecord {
                    encounter_id: format!("ENC{case:05}"),
                    base_qid: family.base_qid.clone(),
                    image_path: format!("img{i}.png"),
                    model_name: "fuzz".into(),
                    answers,
                }
            })
            .collect();
        let seed = rng.random();
        let out = aggregate_group(&records, &catalog, seed).map_err(fail)?;
        ensure(out.answers.len() <= family.max_answers(), || {
            format!("case {case}: {} answers for {}", out.answers.len(), family.base_qid)
        })?;
        let slots: BTreeSet<String> = family.slot_qids().into_iter().collect();
        let filled: BTreeSet<String> = out.slot_indices.keys().cloned().collect();
        ensure(slots == filled, || {
            format!("case {case}: slots {filled:?} vs {slots:?}")
        })?;
        ensure(out.slot_indices.values().all(|&i| i < options.len()), || {
            format!("case {case}: out-of-range index in {:?}", out.slot_indices)
        })?;
        if family.base_qid == "CQID034" {
            ensure(out.slot_indices.len() == 6, || {
                format!("case {case}: CQID034 resolved {} slots", out.slot_indices.len())
            })?;
            color_cases += 1;
        }
    }
    Ok(format!("10000 cases, {color_cases} CQID034 cases with 6 slots"))
}

fn ac7_decision_gating() -> Check {
    let catalog = QuestionCatalog::new(synthetic::question_definitions()).map_err(fail)?;
    let family = catalog.family("CQID020").ok_or("CQID020 missing")?;
    let question = family.lead();
    let answer = question.options[0].clone();
    let evidence = EvidenceBundle {
        findings: UnifiedFindings::default(),
        context: ClinicalContext::default(),
        passages: vec![],
        weights: EvidenceWeights::UNIFORM,
        concordance_notes: String::new(),
        question_family: family.base_qid.clone(),
    };
    let templates = TemplateSet::builtin();
    let clock = Clock::Fixed("t".into());
    let ctx = LoopContext {
        encounter_id: "ENC00001",
        fixture_keys: vec![],
        clock: &clock,
        templates: &templates,
    };
    // (confidence, reflection asks for revision, expected chat calls)
    let cases = [
        (0.9, false, 1),
        (0.75, true, 1),
        (0.5, false, 2),
        (0.7499, true, 3),
        (0.2, true, 3),
    ];
    for (confidence, revise, expected) in cases {
        let fixtures = MockFixtures::default()
            .with(
                REASONING,
                "*",
                json!({"answers": [answer], "confidence": confidence, "rationale": "r"}),
            )
            .with(
                REFLECTION,
                "*",
                json!({"requires_revision": revise, "critique": "check distribution"}),
            )
            .with(
                REANALYSIS,
                "*",
                json!({"answers": [answer], "confidence": 0.8, "rationale": "r2"}),
            );
        let mock = MockChatBackend::new(fixtures);
        let outcome = run_decision_loop(
            question,
            family.max_answers(),
            &evidence,
            &BTreeMap::new(),
            0.75,
            &mock,
            &ctx,
        )
        .map_err(fail)?;
        ensure(mock.calls() == expected && outcome.backend_calls == expected, || {
            format!(
                "confidence {confidence} revise {revise}: {} calls, expected {expected}",
                mock.calls()
            )
        })?;
        ensure(outcome.decision.revised == (expected == 3), || {
            format!("confidence {confidence}: revised flag wrong")
        })?;
    }
    Ok("1/1/2/3/3 calls for confidence 0.9, 0.75, 0.5, 0.7499, 0.2".into())
}

fn mock_config(config: &Path) -> Result<PipelineConfig, String> {
    PipelineConfig::load(
        Some(config),
        &Overrides {
            mock_backends: true,
            ..Overrides::default()
        },
    )
    .map_err(fail)
}

fn ac8_retrieval_gating() -> Check {
    let dir = tempfile::tempdir().map_err(fail)?;
    let split = synthetic::generate(dir.path(), 10, 8).map_err(fail)?;
    let config = mock_config(&split.config)?;
    pipeline::cmd_preprocess(&config).map_err(fail)?;
    pipeline::cmd_build_kb(&config).map_err(fail)?;
    let report = pipeline::cmd_run(&config).map_err(fail)?;
    let text = std::fs::read_to_string(config.stage_dir(pipeline::RUN).join(pipeline::TRACES_JSONL)).map_err(fail)?;
    let mut invoked: HashMap<(String, String), bool> = HashMap::new();
    for line in text.lines() {
        let trace: Value = serde_json::from_str(line).map_err(fail)?;
        if trace["stage"] == "retrieval" {
            invoked.insert(
                (
                    trace["encounter_id"].as_str().unwrap_or("").into(),
                    trace["base_qid"].as_str().unwrap_or("").into(),
                ),
                trace["payload"]["invoked"].as_bool().unwrap_or(true),
            );
        }
    }
    ensure(report.decisions == 90, || format!("{} decisions", report.decisions))?;
    for family in ["CQID034", "CQID012"] {
        let calls = report.retrieval_calls[family];
        let traced = invoked.iter().filter(|((_, f), on)| f == family && **on).count();
        ensure(calls == 0 && traced == 0, || {
            format!("{family}: {calls} retrieval calls, {traced} traces")
        })?;
    }
    let per_encounter = invoked.iter().filter(|((_, f), on)| f == "CQID011" && **on).count();
    ensure(per_encounter == 10 && report.retrieval_calls["CQID011"] >= 10, || {
        format!(
            "CQID011: {per_encounter} encounters retrieved, {} calls",
            report.retrieval_calls["CQID011"]
        )
    })?;
    Ok(format!(
        "CQID034/CQID012 0 calls, CQID011 {} calls over 10 encounters",
        report.retrieval_calls["CQID011"]
    ))
}

fn ac9_preprocessing() -> Check {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let nm = NOT_MENTIONED;
    ensure(
        canonicalize_family_answers(&[s(&[nm]), s(&[nm]), s(&[nm])]) == nm,
        || "all Not mentioned".into(),
    )?;
    ensure(
        canonicalize_family_answers(&[s(&["arm"]), s(&[nm]), s(&[nm])]) == "arm",
        || "mixed slots".into(),
    )?;
    ensure(
        canonicalize_family_answers(&[s(&["arm"]), s(&["leg"]), s(&["arm"])]) == "arm, leg",
        || "dedup".into(),
    )?;
    ensure(clean_answer_text("other (please specify)") == "other", || {
        "please specify".into()
    })?;
    ensure(
        clean_answer_text("  ['combination (please specify)'] ") == "combination",
        || "brackets".into(),
    )?;

    let catalog = QuestionCatalog::new(synthetic::question_definitions()).map_err(fail)?;
    let encounters: Vec<EncounterRecord> = (0..10)
        .map(|i| EncounterRecord {
            encounter_id: format!("ENC{i:05}"),
            query_title: "rash".into(),
            query_content: "itchy rash on arm".into(),
            image_ids: (0..(i % 3 + 1)).map(|j| format!("IMG_{i}_{j}.png")).collect(),
        })
        .collect();
    let images: usize = encounters.iter().map(|e| e.image_ids.len()).sum();
    let set = build_samples(&encounters, None, &catalog).map_err(fail)?;
    ensure(set.samples.len() == images * 9, || {
        format!("{} samples for {images} images", set.samples.len())
    })?;
    let pairs: BTreeSet<(String, String, String)> = set
        .samples
        .iter()
        .map(|s| (s.encounter_id.clone(), s.base_qid.clone(), s.image_path.clone()))
        .collect();
    ensure(pairs.len() == set.samples.len(), || {
        "duplicate image-question rows".into()
    })?;

    let mut samples = set.samples.clone();
    while samples.len() < 250 {
        samples.extend(set.samples.iter().cloned());
    }
    samples.truncate(250);
    let dir = tempfile::tempdir().map_err(fail)?;
    let files = serialize_batches(&samples, dir.path(), 100).map_err(fail)?;
    let sizes: Vec<usize> = files
        .iter()
        .map(|f| std::fs::read_to_string(f).map(|t| t.lines().filter(|l| !l.trim().is_empty()).count()))
        .collect::<Result<_, _>>()
        .map_err(fail)?;
    ensure(sizes == [100, 100, 50], || format!("batch sizes {sizes:?}"))?;
    ensure(load_batches(dir.path()).map_err(fail)? == samples, || {
        "batch round trip differs".into()
    })?;
    Ok(format!(
        "{} samples, batches {sizes:?}, round trip equal",
        set.samples.len()
    ))
}

fn full_run(root: &Path) -> Result<Vec<Vec<u8>>, String> {
    let split = synthetic::generate(root, 10, 10).map_err(fail)?;
    let config = mock_config(&split.config)?;
    let backends = Backends::from_config(&config).map_err(fail)?;
    pipeline::cmd_preprocess(&config).map_err(fail)?;
    pipeline::cmd_build_kb(&config).map_err(fail)?;
    pipeline::cmd_run_with(&config, &backends).map_err(fail)?;
    pipeline::cmd_aggregate(&config).map_err(fail)?;
    pipeline::cmd_evaluate(&config).map_err(fail)?;
    pipeline::cmd_agreement(&config).map_err(fail)?;
    pipeline::final_outputs(&config)
        .iter()
        .map(|p| std::fs::read(p).map_err(|e| Error::io(p, e).to_string()))
        .collect()
}

fn ac10_reproducibility() -> Check {
    let a = tempfile::tempdir().map_err(fail)?;
    let b = tempfile::tempdir().map_err(fail)?;
    let first = full_run(a.path())?;
    let second = full_run(b.path())?;
    let names = ["submission.json", "submission.csv", "scores.csv", "agreement.csv"];
    for ((name, x), y) in names.iter().zip(&first).zip(&second) {
        ensure(!x.is_empty() && x == y, || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} files byte-identical across two runs", names.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("AC1 table arithmetic", ac1_table_arithmetic, Duration::from_secs(1)),
        ("AC2 BM25 oracle", ac2_bm25_oracle, Duration::from_secs(5)),
        ("AC3 dense oracle", ac3_dense_oracle, Duration::from_secs(5)),
        ("AC4 hybrid dedup", ac4_hybrid_dedup, Duration::from_secs(5)),
        (
            "AC5 consolidation determinism",
            ac5_consolidation_determinism,
            Duration::from_secs(5),
        ),
        ("AC6 answer limits", ac6_answer_limits, Duration::from_secs(10)),
        ("AC7 decision-loop gating", ac7_decision_gating, Duration::from_secs(1)),
        ("AC8 retrieval gating", ac8_retrieval_gating, Duration::from_secs(30)),
        ("AC9 preprocessing fidelity", ac9_preprocessing, Duration::from_secs(5)),
        ("AC10 reproducibility", ac10_reproducibility, Duration::from_secs(120)),
    ];
    let mut failed = 0;
    for (name, check, limit) in criteria {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed <= limit => Ok(detail),
            Ok(detail) => Err(format!("{detail}; took {elapsed:.2?}, limit {limit:?}")),
            Err(e) => Err(e),
        };
        match outcome {
            Ok(detail) => println!("[PASS] {name} ({elapsed:.2?}): {detail}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {name} ({elapsed:.2?}): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
