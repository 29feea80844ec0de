#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use spatial_eval::dataset::{Category, Choice, Exemplar, ImageRef, Sample};
use spatial_eval::metrics::EvalRecord;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

pub const TINY_PNG: &str = "data:image/png;base64,iVBORw0KGgoAAAANSUhEUgAAAAEAAAABCAYAAAAfFcSJAAAADUlEQVR42mP8z8BQDwAEhQGAhKmMIQAAAABJRU5ErkJggg==";

const LABELS: [&str; 4] = ["A", "B", "C", "D"];

/// Counting records carry counts as digit strings (sometimes junk); other
/// categories use choice labels. Every record gets exactly four predictions.
pub fn random_records(rng: &mut impl Rng, n: usize) -> Vec<EvalRecord> {
    (0..n)
        .map(|i| {
            let category = *[Category::Counting, Category::Relation, Category::Depth, Category::Distance]
                .choose(rng)
                .unwrap();
            let answer = |rng: &mut dyn rand::RngCore| -> String {
                if category == Category::Counting {
                    if rng.gen_bool(0.1) {
                        "n/a".to_string()
                    } else {
                        rng.gen_range(0..6u32).to_string()
                    }
                } else {
                    LABELS[rng.gen_range(0..LABELS.len())].to_string()
                }
            };
            let truth = loop {
                let t = answer(rng);
                if t != "n/a" {
                    break t;
                }
            };
            EvalRecord {
                sample_id: format!("r{i}"),
                category,
                strategy: "direct".into(),
                predictions: (0..4).map(|_| answer(rng)).collect(),
                truth,
                ood: false,
                choices: None,
            }
        })
        .collect()
}

/// Brute-force Pass@k: walks the predictions one by one.
pub fn oracle_pass_at_k(records: &[EvalRecord], k: usize) -> (u64, u64) {
    let mut hits = 0u64;
    for r in records {
        let mut found = false;
        let mut i = 0;
        while i < k {
            if r.predictions[i] == r.truth {
                found = true;
            }
            i += 1;
        }
        if found {
            hits += 1;
        }
    }
    (hits, records.len() as u64)
}

/// Brute-force close-call over Counting records with digit-only answers.
pub fn oracle_close_call(records: &[EvalRecord]) -> Option<(u64, u64)> {
    let mut wrong = 0u64;
    let mut close = 0u64;
    for r in records {
        let first = &r.predictions[0];
        if *first == r.truth {
            continue;
        }
        wrong += 1;
        if let (Ok(p), Ok(t)) = (first.parse::<i64>(), r.truth.parse::<i64>()) {
            if (p - t).abs() == 1 {
                close += 1;
            }
        }
    }
    if wrong == 0 {
        None
    } else {
        Some((close, wrong))
    }
}

const OBJECTS: [&str; 8] = ["the lamp", "the chair", "the sofa", "the plant", "the mug", "the box", "the cat", "the bike"];

fn random_question(rng: &mut impl Rng, category: Category) -> String {
    let a = OBJECTS.choose(rng).unwrap();
    match category {
        Category::Counting => format!("How many {} are there?", ["cubes", "chairs", "cats"].choose(rng).unwrap()),
        Category::Relation => format!("Is {a} to the left or right of the table?"),
        Category::Depth => ["Which object is closer to the camera?", "Which object is farther from the camera?", "Which object is closest to the viewer?"]
            .choose(rng)
            .unwrap()
            .to_string(),
        Category::Distance => format!(
            "Which of these two objects is {} {a}?",
            ["closer to", "farther from", "close to", "far from"].choose(rng).unwrap()
        ),
        _ => "Did the camera move left or right?".to_string(),
    }
}

pub fn random_sample(rng: &mut impl Rng, id: &str, category: Category) -> Sample {
    let images = if category.is_motion() { 2 } else { 1 };
    let (choices, truth) = if category == Category::Counting {
        (None, rng.gen_range(0..10u32).to_string())
    } else {
        let n = if matches!(category, Category::Depth | Category::Distance) { 2 } else { rng.gen_range(2..=4) };
        let mut texts: Vec<&str> = OBJECTS.to_vec();
        texts.shuffle(rng);
        let choices: Vec<Choice> = (0..n).map(|i| Choice::new(LABELS[i], texts[i])).collect();
        let truth = choices[rng.gen_range(0..n)].label.clone();
        (Some(choices), truth)
    };
    let mut meta = BTreeMap::new();
    if rng.gen_bool(0.3) {
        meta.insert("context".to_string(), format!("context {}", rng.gen::<u16>()));
    }
    Sample {
        id: id.into(),
        images: (0..images)
            .map(|i| if rng.gen_bool(0.5) { ImageRef::new(TINY_PNG) } else { ImageRef::new(format!("img/{id}_{i}.png")) })
            .collect(),
        question: random_question(rng, category),
        choices,
        truth,
        category,
        source: "synthetic".into(),
        meta,
    }
}

/// Exemplars carry a distinctive answer marker so leaks are easy to find.
pub fn random_exemplar(rng: &mut impl Rng, id: &str, category: Category) -> Exemplar {
    let sample = random_sample(rng, id, category);
    Exemplar {
        answer: sample.truth.clone(),
        reasoning: format!("reasoning {id}"),
        scene_graph: format!("{{\"objects\": [\"{id}\"]}}"),
        sample,
    }
}

pub fn random_category(rng: &mut impl Rng) -> Category {
    *Category::ALL[..6].choose(rng).unwrap()
}

pub use spatial_eval::extraction::ExtractionTier;

fn prose(rng: &mut impl Rng) -> String {
    const WORDS: [&str; 10] = ["the", "scene", "has", "a", "red", "cube", "left", "of", "graph:", "so"];
    (0..rng.gen_range(0..6)).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn json_object(rng: &mut impl Rng, tag: usize) -> String {
    let depth = rng.gen_range(0..3);
    let mut inner = format!("\"name\": \"obj{tag}\"");
    for d in 0..depth {
        inner = format!("\"level{d}\": {{{inner}}}");
    }
    format!("{{\"objects\": [{{{inner}}}], \"note\": \"brace }} in string\"}}")
}

/// A response assembled from prose, fenced blocks, bare JSON objects and
/// `<code>` tags, with the tier and text the extractor must report.
pub fn mixed_response(rng: &mut impl Rng) -> (String, ExtractionTier, String) {
    let mut parts = Vec::new();
    let mut first_fence: Option<String> = None;
    let mut first_brace: Option<String> = None;
    let mut first_code: Option<String> = None;
    for i in 0..rng.gen_range(1..6) {
        parts.push(prose(rng));
        match rng.gen_range(0..4) {
            0 => {
                let body = json_object(rng, i);
                let open = ["```json\n", "```\n", "```json"][rng.gen_range(0..3)];
                parts.push(format!("{open}{body}\n```"));
                first_fence.get_or_insert(body);
            }
            1 => {
                let body = json_object(rng, i);
                parts.push(body.clone());
                first_brace.get_or_insert(body);
            }
            2 => {
                let body = format!("obj{i} left of obj{}", i + 1);
                parts.push(format!("<code>{body}</code>"));
                first_code.get_or_insert(body);
            }
            _ => {}
        }
    }
    parts.push(prose(rng));
    let text = parts.join("\n");
    let (tier, expected) = if let Some(f) = first_fence {
        (ExtractionTier::FencedBlock, f)
    } else if let Some(b) = first_brace {
        (ExtractionTier::BraceBalanced, b)
    } else if let Some(c) = first_code {
        (ExtractionTier::CodeTag, c)
    } else {
        (ExtractionTier::WholeText, text.trim().to_string())
    };
    (text, tier, expected)
}

pub mod mini {
    use std::path::{Path, PathBuf};
    use std::sync::Arc;

    use spatial_eval::runner::{run_eval, RunConfig, RunSummary};
    use spatial_eval::vlm_client::{scripted_stub, Rule, ScriptedStub};

    pub fn dir() -> PathBuf {
        super::data_dir().join("mini")
    }

    pub fn stub() -> ScriptedStub {
        #[derive(serde::Deserialize)]
        struct File {
            rules: Vec<Rule>,
        }
        let text = std::fs::read_to_string(dir().join("stub_rules.json")).unwrap();
        scripted_stub(serde_json::from_str::<File>(&text).unwrap().rules)
    }

    pub fn config(out: &Path, parallelism: usize) -> RunConfig {
        let mut cfg = RunConfig::new(dir().join("dataset.jsonl"), "scene-graph-cot".parse().unwrap(), out);
        cfg.endpoint.parallelism = parallelism;
        cfg
    }

    pub fn run(out: &Path, parallelism: usize) -> (RunSummary, Arc<ScriptedStub>) {
        let stub = Arc::new(stub());
        let summary = run_eval(&config(out, parallelism), stub.clone()).unwrap();
        (summary, stub)
    }
}
