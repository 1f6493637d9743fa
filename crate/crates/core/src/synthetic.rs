//! Seeded synthetic split: question definitions, encounters with image
//! files, gold annotations, a small knowledge base, advisory prediction
//! files, mock backend fixtures and a matching pipeline config.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::aggregation::{write_predictions, PredictionRecord};
use crate::backends::MockFixtures;
use crate::dataset::{clean_answer_text, clean_question_text, QuestionDefinition, NOT_MENTIONED};
use crate::error::{Error, Result};
use crate::templates::{
    CLINICAL_CONTEXT, DIAGNOSIS, EVIDENCE_INTEGRATION, IMAGE_ANALYSIS, QUERY_GENERATION, REANALYSIS, REASONING,
    REFLECTION,
};

struct FamilySpec {
    base_qid: &'static str,
    slots: usize,
    question: &'static str,
    question_type: &'static str,
    category: &'static str,
    options: &'static [&'static str],
}

const FAMILIES: &[FamilySpec] = &[
    FamilySpec {
        base_qid: "CQID010",
        slots: 1,
        question: "How much of the body is affected?",
        question_type: "Site",
        category: "General",
        options: &["single spot", "limited area", "widespread", NOT_MENTIONED],
    },
    FamilySpec {
        base_qid: "CQID011",
        slots: 6,
        question: "Where is the affected area? Please specify which affected area for each selection.",
        question_type: "Site Location",
        category: "General",
        options: &[
            "head",
            "neck",
            "upper extremities",
            "lower extremities",
            "chest/abdomen",
            "back",
            "other (please specify)",
            NOT_MENTIONED,
        ],
    },
    FamilySpec {
        base_qid: "CQID012",
        slots: 3,
        question: "How large are the affected areas?",
        question_type: "Size",
        category: "General",
        options: &["size of thumb nail", "size of palm", "larger area", NOT_MENTIONED],
    },
    FamilySpec {
        base_qid: "CQID015",
        slots: 1,
        question: "When did the patient first notice the issue?",
        question_type: "Onset",
        category: "General",
        options: &[
            "within hours",
            "within days",
            "within weeks",
            "within months",
            "over a year",
            "multiple years",
            NOT_MENTIONED,
        ],
    },
    FamilySpec {
        base_qid: "CQID020",
        slots: 6,
        question: "What label best describes the affected area?",
        question_type: "Skin Description",
        category: "General",
        options: &[
            "raised or bumpy",
            "flat",
            "skin loss or sunken",
            "thick or raised",
            "thin or close to the surface",
            "warty",
            "crust",
            "scab",
            "weeping",
            NOT_MENTIONED,
        ],
    },
    FamilySpec {
        base_qid: "CQID025",
        slots: 1,
        question: "Is there any itching?",
        question_type: "Itch",
        category: "General",
        options: &["yes", "no", NOT_MENTIONED],
    },
    FamilySpec {
        base_qid: "CQID034",
        slots: 6,
        question: "What is the color of the skin lesion?",
        question_type: "Lesion Color",
        category: "General",
        options: &[
            "normal skin color",
            "pink",
            "red",
            "brown",
            "blue",
            "purple",
            "black",
            "white",
            "combination (please specify)",
            "hyperpigmentation",
            "hypopigmentation",
            NOT_MENTIONED,
        ],
    },
    FamilySpec {
        base_qid: "CQID035",
        slots: 1,
        question: "How many skin lesions are there?",
        question_type: "Lesion Count",
        category: "General",
        options: &["single", "multiple (please specify)", NOT_MENTIONED],
    },
    FamilySpec {
        base_qid: "CQID036",
        slots: 2,
        question: "What is the skin lesion texture?",
        question_type: "Texture",
        category: "General",
        options: &["smooth", "rough", NOT_MENTIONED],
    },
];

fn slot_qid(base: &str, slot: usize) -> String {
    format!("{base}-{:03}", slot + 1)
}

/// Raw definitions file content, with numbered questions and
/// "(please specify)" options as they appear in the challenge files.
pub fn definitions_json() -> Value {
    let mut entries = Vec::new();
    let mut number = 0;
    for family in FAMILIES {
        for slot in 0..family.slots {
            number += 1;
            entries.push(json!({
                "qid": slot_qid(family.base_qid, slot),
                "question_en": format!("{number}. {}", family.question),
                "options_en": family.options,
                "question_type_en": family.question_type,
                "question_category_en": family.category,
            }));
        }
    }
    Value::Array(entries)
}

/// The nine families (27 slot qids) after cleaning.
pub fn question_definitions() -> Vec<QuestionDefinition> {
    FAMILIES
        .iter()
        .flat_map(|family| {
            (0..family.slots).map(move |slot| QuestionDefinition {
                qid: slot_qid(family.base_qid, slot),
                base_qid: family.base_qid.to_string(),
                slot_index: slot,
                question_text: clean_question_text(family.question),
                options: family.options.iter().map(|o| clean_answer_text(o)).collect(),
                question_type: family.question_type.to_string(),
                question_category: family.category.to_string(),
                max_answers: family.slots,
            })
        })
        .collect()
}

const PNG_BYTES: &[u8] = &[
    0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A, 0, 0, 0, 0x0D, b'I', b'H', b'D', b'R',
];

const KNOWLEDGE: &[(&str, &str)] = &[
    ("Atopic dermatitis", "Atopic dermatitis (eczema) is an itchy inflammatory condition. Common body locations are the flexures of the elbows and knees, hands, neck and face. Lesions are red, dry and scaly and may weep or crust when scratched."),
    ("Contact dermatitis", "Contact dermatitis follows exposure to irritants or allergens such as cement, hardeners, nickel or detergents. It commonly affects the hands and forearms and causes red itchy patches with scaling or blisters."),
    ("Psoriasis", "Psoriasis presents as thick raised plaques with silvery scale. Common body locations include the elbows, knees, scalp and lower back. Plaques are well demarcated, pink or red and often symmetrical."),
    ("Tinea corporis", "Tinea corporis is a fungal infection forming ring shaped red patches with a raised scaly border and clearer centre. It may appear on the trunk, limbs or groin and is often itchy."),
    ("Urticaria", "Urticaria causes raised itchy wheals that come and go within hours. Wheals are pink or red, smooth and may appear anywhere on the body, often widespread."),
    ("Seborrheic keratosis", "Seborrheic keratosis is a benign warty growth, brown or black, that looks stuck on. Lesions are common on the back and chest of older adults and persist for years."),
    ("Herpes zoster", "Herpes zoster (shingles) produces painful grouped blisters on a red base in a band on one side of the chest, back or face. Blisters crust over within days."),
    ("Impetigo", "Impetigo is a contagious bacterial infection with honey coloured crusts, often around the nose and mouth or on the limbs of children."),
    ("Vitiligo", "Vitiligo causes flat white patches from loss of pigment (hypopigmentation) on the hands, face and around body openings. The skin texture is smooth."),
    ("Insect bites", "Insect bites cause small raised itchy bumps, often multiple, on exposed skin such as the lower legs and arms, appearing within hours to days."),
    ("Acne vulgaris", "Acne presents with comedones, papules and pustules on the face, chest and upper back, and can leave scars or hyperpigmentation."),
    ("Lichen simplex chronicus", "Chronic scratching produces thick leathery rough skin (lichenification) with excoriations, commonly on the neck, wrists, ankles and lower legs, lasting months to years."),
];

const ADVISORY_MODELS: &[&str] = &["advisor-a", "advisor-b"];

const LOCATION_WORDS: &[(&str, &str)] = &[
    ("head", "scalp"),
    ("neck", "neck"),
    ("upper extremities", "forearm"),
    ("lower extremities", "lower leg"),
    ("chest/abdomen", "chest"),
    ("back", "back"),
    ("other", "groin"),
];

/// Paths of a generated split.
#[derive(Debug, Clone)]
pub struct SyntheticSplit {
    pub root: PathBuf,
    pub config: PathBuf,
    pub encounter_ids: Vec<String>,
    pub split: String,
}

struct EncounterPlan {
    id: String,
    images: Vec<String>,
    /// Gold answer texts per family, in FAMILIES order.
    gold: Vec<Vec<String>>,
}

fn pick_answers(rng: &mut ChaCha8Rng, family: &FamilySpec, options: &[String]) -> Vec<String> {
    let real: Vec<&String> = options.iter().filter(|o| o.as_str() != NOT_MENTIONED).collect();
    if rng.random_bool(0.1) {
        return vec![NOT_MENTIONED.to_string()];
    }
    let count = rng.random_range(1..=family.slots.min(3));
    let mut chosen: Vec<String> = real.choose_multiple(rng, count).map(|s| s.to_string()).collect();
    chosen.sort_by_key(|a| options.iter().position(|o| o == a));
    chosen
}

fn perturb(rng: &mut ChaCha8Rng, answers: &[String], options: &[String], rate: f64) -> Vec<String> {
    if !rng.random_bool(rate) {
        return answers.to_vec();
    }
    let replacement = options.choose(rng).expect("options are non-empty").clone();
    let mut out = answers.to_vec();
    let slot = rng.random_range(0..out.len());
    out[slot] = replacement;
    out.dedup();
    out
}

fn family_key(encounter: &str, base_qid: &str) -> String {
    format!("{encounter}/{base_qid}")
}

/// Writes a complete synthetic split under `root` and returns its paths.
pub fn generate(root: &Path, encounters: usize, seed: u64) -> Result<SyntheticSplit> {
    let split = "valid".to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let defs = question_definitions();
    let options_of = |base: &str| -> Vec<String> {
        defs.iter()
            .find(|d| d.base_qid == base)
            .expect("family defined")
            .options
            .clone()
    };
    let write = |path: PathBuf, text: String| -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    let pretty = |v: &Value| serde_json::to_string_pretty(v).expect("json serializes") + "\n";

    write(root.join("definitions.json"), pretty(&definitions_json()))?;

    let image_dir = root.join("images").join(&split);
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut plans = Vec::new();
    for n in 1..=encounters {
        let id = format!("ENC{n:05}");
        let image_count = rng.random_range(2..=3);
        let mut images = Vec::new();
        for i in 1..=image_count {
            let name = format!("IMG_{id}_{i}.png");
            let path = image_dir.join(&name);
            fs::write(&path, PNG_BYTES).map_err(|e| Error::io(&path, e))?;
            images.push(name);
        }
        if n == 3 {
            let name = format!("IMG_{id}_corrupt.png");
            let path = image_dir.join(&name);
            fs::write(&path, b"not an image").map_err(|e| Error::io(&path, e))?;
            images.push(name);
        }
        let gold = FAMILIES
            .iter()
            .map(|f| pick_answers(&mut rng, f, &options_of(f.base_qid)))
            .collect();
        plans.push(EncounterPlan { id, images, gold });
    }

    let family_index = |base: &str| FAMILIES.iter().position(|f| f.base_qid == base).expect("known family");
    let gold_of = |plan: &EncounterPlan, base: &str| plan.gold[family_index(base)].clone();

    // Encounters with narrative text consistent with the gold answers.
    let mut encounter_json = Vec::new();
    for plan in &plans {
        let locations: Vec<&str> = gold_of(plan, "CQID011")
            .iter()
            .filter_map(|l| LOCATION_WORDS.iter().find(|(k, _)| k == l).map(|(_, w)| *w))
            .collect();
        let site = if locations.is_empty() {
            "skin".to_string()
        } else {
            locations.join(" and ")
        };
        let onset = gold_of(plan, "CQID015")[0].clone();
        let itch = gold_of(plan, "CQID025")[0].clone();
        let itch_text = match itch.as_str() {
            "yes" => " It itches a lot 😩😩.",
            "no" => " It does not itch.",
            _ => "",
        };
        let content = if onset == NOT_MENTIONED {
            format!("I have a rash on my {site}.{itch_text} What is it?")
        } else {
            format!("I noticed this rash on my {site} {onset} ago.{itch_text} What is it?")
        };
        encounter_json.push(json!({
            "encounter_id": plan.id,
            "image_ids": plan.images,
            "query_title_en": format!("Rash on {site}"),
            "query_content_en": content,
        }));
    }
    write(
        root.join(format!("{split}.json")),
        pretty(&Value::Array(encounter_json)),
    )?;

    // Gold annotations: answers fill the first slots, "Not mentioned" the rest.
    let mut gold_json = Vec::new();
    for plan in &plans {
        let mut entry = serde_json::Map::new();
        entry.insert("encounter_id".into(), json!(plan.id));
        for (family, answers) in FAMILIES.iter().zip(&plan.gold) {
            let options = options_of(family.base_qid);
            let nm = options
                .iter()
                .position(|o| o == NOT_MENTIONED)
                .expect("has Not mentioned");
            for slot in 0..family.slots {
                let index = answers
                    .get(slot)
                    .map(|a| options.iter().position(|o| o == a).expect("gold answer is an option"))
                    .unwrap_or(nm);
                entry.insert(slot_qid(family.base_qid, slot), json!(index));
            }
        }
        gold_json.push(Value::Object(entry));
    }
    write(
        root.join(format!("{split}_cvqa.json")),
        pretty(&Value::Array(gold_json)),
    )?;

    let kb: Vec<String> = KNOWLEDGE
        .iter()
        .enumerate()
        .map(|(i, (title, body))| {
            json!({"id": format!("kb-{:03}", i + 1), "title": title, "body": body, "source": "synthetic"}).to_string()
        })
        .collect();
    write(root.join("knowledge.jsonl"), kb.join("\n") + "\n")?;

    // Advisory predictions, one row per valid image.
    let mut advisory_paths = Vec::new();
    for model in ADVISORY_MODELS {
        let mut records = Vec::new();
        for plan in &plans {
            for image in plan.images.iter().filter(|i| !i.contains("corrupt")) {
                for (family, gold) in FAMILIES.iter().zip(&plan.gold) {
                    records.push(PredictionRecord {
                        encounter_id: plan.id.clone(),
                        base_qid: family.base_qid.to_string(),
                        image_path: image.clone(),
                        model_name: model.to_string(),
                        answers: perturb(&mut rng, gold, &options_of(family.base_qid), 0.3),
                    });
                }
            }
        }
        let rel = format!("advisory/{{split}}/{model}.csv");
        write_predictions(&root.join(rel.replace("{split}", &split)), &records)?;
        advisory_paths.push(rel);
    }

    write(
        root.join("mock_fixtures.json"),
        serde_json::to_string_pretty(&fixtures(&plans, &mut rng, &options_of)).expect("fixtures serialize") + "\n",
    )?;

    let config = json!({
        "split": split,
        "seed": 42,
        "workers": 4,
        "mock_backends": true,
        "paths": {
            "definitions": "definitions.json",
            "encounters": "{split}.json",
            "annotations": "{split}_cvqa.json",
            "images_dir": "images/{split}",
            "knowledge_base": "knowledge.jsonl",
            "advisory": advisory_paths,
            "mock_fixtures": "mock_fixtures.json",
            "output_dir": "out",
        },
    });
    let config_path = root.join("config.json");
    write(config_path.clone(), pretty(&config))?;
    Ok(SyntheticSplit {
        root: root.to_path_buf(),
        config: config_path,
        encounter_ids: plans.iter().map(|p| p.id.clone()).collect(),
        split,
    })
}

fn fixtures(plans: &[EncounterPlan], rng: &mut ChaCha8Rng, options_of: &dyn Fn(&str) -> Vec<String>) -> MockFixtures {
    let mut fx = MockFixtures::default();
    fx.insert(
        IMAGE_ANALYSIS,
        "*",
        json!({"morphology": [], "anatomical_locations": [], "colors": []}),
    );
    fx.insert(CLINICAL_CONTEXT, "*", json!({}));
    fx.insert(DIAGNOSIS, "*", json!({"diagnoses": []}));
    fx.insert(QUERY_GENERATION, "*", json!("no structured output"));
    fx.insert(
        EVIDENCE_INTEGRATION,
        "*",
        json!({"integrated_findings": "see findings", "concordance": "sources broadly agree", "weighted_summary": "visual features dominate"}),
    );
    fx.insert(
        REASONING,
        "*",
        json!({"answers": [NOT_MENTIONED], "confidence": 0.9, "rationale": "no evidence"}),
    );
    fx.insert(
        REFLECTION,
        "*",
        json!({"requires_revision": false, "critique": "answer holds", "adjusted_confidence": null}),
    );
    fx.insert(
        REANALYSIS,
        "*",
        json!({"answers": [NOT_MENTIONED], "confidence": 0.8, "rationale": "reaffirmed"}),
    );

    let diagnoses = [
        "eczema",
        "contact dermatitis",
        "psoriasis",
        "tinea corporis",
        "urticaria",
        "insect bites",
    ];
    let confidences = [0.95, 0.9, 0.8, 0.75, 0.7, 0.6, 0.5];
    for plan in plans {
        let gold = |base: &str| plan.gold[FAMILIES.iter().position(|f| f.base_qid == base).expect("known")].clone();
        let morphology = gold("CQID020");
        let colors = gold("CQID034");
        let locations = gold("CQID011");
        for (i, image) in plan.images.iter().enumerate() {
            // Later images see a subset of the colors, so findings vary.
            let seen_colors: Vec<&String> = colors.iter().take(colors.len().saturating_sub(i).max(1)).collect();
            fx.insert(
                IMAGE_ANALYSIS,
                image,
                json!({
                    "morphology": morphology,
                    "anatomical_locations": locations,
                    "colors": seen_colors,
                    "textures": gold("CQID036"),
                    "distribution": gold("CQID010")[0],
                    "trauma_signs": [],
                    "chronicity_cues": [],
                }),
            );
        }
        let itch = match gold("CQID025")[0].as_str() {
            "yes" => "yes",
            "no" => "no",
            _ => "unmentioned",
        };
        fx.insert(
            CLINICAL_CONTEXT,
            &plan.id,
            json!({"reported_locations": locations, "duration": gold("CQID015")[0], "itch": itch, "pain": "unmentioned", "triggers": []}),
        );
        let first = *diagnoses.choose(rng).expect("non-empty");
        let second = *diagnoses.choose(rng).expect("non-empty");
        fx.insert(
            DIAGNOSIS,
            &plan.id,
            json!({"diagnoses": [{"name": first, "confidence": 0.6}, {"name": second, "confidence": 0.3}, {"name": first, "confidence": 0.1}]}),
        );
        for family in FAMILIES {
            let key = family_key(&plan.id, family.base_qid);
            let options = options_of(family.base_qid);
            let answers = gold(family.base_qid);
            fx.insert(
                QUERY_GENERATION,
                &key,
                json!({"queries": [format!("{first} {}", family.question_type.to_lowercase()), format!("{second} common body locations")]}),
            );
            let confidence = *confidences.choose(rng).expect("non-empty");
            let first_answers = perturb(rng, &answers, &options, 0.35);
            fx.insert(
                REASONING,
                &key,
                json!({"answers": first_answers, "confidence": confidence, "rationale": format!("weighted evidence for {}", family.question_type)}),
            );
            let revise = first_answers != answers || rng.random_bool(0.2);
            fx.insert(
                REFLECTION,
                &key,
                json!({"requires_revision": revise, "critique": if revise { "overlooked findings in the images" } else { "answer holds" }, "adjusted_confidence": 0.7}),
            );
            let mut final_answers = answers.clone();
            if rng.random_bool(0.1) {
                final_answers.shuffle(rng);
            }
            fx.insert(
                REANALYSIS,
                &key,
                json!({"answers": final_answers, "confidence": 0.85, "rationale": "re-examined the images and history"}),
            );
        }
    }
    fx
}
