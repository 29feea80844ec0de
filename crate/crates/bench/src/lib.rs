//! Seeded workload generators for the benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spatial_eval::dataset::{Category, Choice, ImageRef, Sample};
use spatial_eval::grpo::{Group, GroupSample};
use spatial_eval::metrics::EvalRecord;

const FILLER: &str = "The red cube is left of the blue sphere and the lamp stands behind the chair. ";

/// Model-like responses mixing prose, fenced JSON, bare objects and answer tags.
pub fn responses(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let prose = FILLER.repeat(rng.gen_range(1..8));
            let graph = format!(r#"{{"objects": [{{"name": "obj{i}", "attributes": {{"color": "red"}}}}], "relationships": [["obj{i}", "left of", "lamp"]]}}"#);
            match rng.gen_range(0..4) {
                0 => format!("{prose}\n```json\n{graph}\n```\n<answer>A</answer>"),
                1 => format!("{prose} {graph} so <answer>{}</answer>", rng.gen_range(0..9)),
                2 => format!("{prose}<code>obj{i} left of lamp</code>\nThe answer is B"),
                _ => prose,
            }
        })
        .collect()
}

pub fn records(n: usize, k: usize, seed: u64) -> Vec<EvalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cats = [Category::Counting, Category::Relation, Category::Depth, Category::Distance];
    (0..n)
        .map(|i| {
            let category = *cats.choose(&mut rng).unwrap();
            let answer = |rng: &mut ChaCha8Rng| {
                if category == Category::Counting {
                    rng.gen_range(0..8).to_string()
                } else {
                    ["A", "B"][rng.gen_range(0..2)].to_string()
                }
            };
            EvalRecord {
                sample_id: format!("s{i}"),
                category,
                strategy: "scene-graph-cot".into(),
                truth: answer(&mut rng),
                predictions: (0..k).map(|_| answer(&mut rng)).collect(),
                ood: false,
                choices: None,
            }
        })
        .collect()
}

pub fn groups(n: usize, size: usize, seed: u64) -> Vec<Group> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Group::new(
                (0..size)
                    .map(|_| GroupSample::new(rng.gen_range(-4.0..0.0), rng.gen_range(-4.0..0.0), rng.gen_range(0..2) as f64))
                    .collect(),
            )
        })
        .collect()
}

pub fn samples(n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| Sample {
            id: format!("b{i}"),
            images: vec![ImageRef::new("data:image/png;base64,AAAA")],
            question: "Which object is closer to the camera?".into(),
            choices: Some(vec![Choice::new("A", "the lamp"), Choice::new("B", "the chair")]),
            truth: "A".into(),
            category: Category::Depth,
            source: "bench".into(),
            meta: Default::default(),
        })
        .collect()
}
