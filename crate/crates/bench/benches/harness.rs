use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use spatial_eval::extraction::{extract_answer, extract_scene_graph, normalize_answer};
use spatial_eval::grpo::{dynamic_sampling_filter, grpo_loss, grpo_loss_gradient, GrpoConfig};
use spatial_eval::metrics::{aggregate_report, render_markdown};
use spatial_eval::prompting::{build_answer_step, build_scene_graph_step};
use spatial_eval_bench::{groups, records, responses, samples};

fn extraction(c: &mut Criterion) {
    let batch = responses(1_000, 1);
    let sample = &samples(1)[0];
    c.bench_function("extract_scene_graph x1000", |b| {
        b.iter(|| batch.iter().filter_map(|r| extract_scene_graph(black_box(r)).ok()).count())
    });
    c.bench_function("extract+normalize answer x1000", |b| {
        b.iter(|| {
            batch
                .iter()
                .filter_map(|r| extract_answer(black_box(r)).ok())
                .map(|a| normalize_answer(&a, sample).len())
                .sum::<usize>()
        })
    });
}

fn metrics(c: &mut Criterion) {
    let recs = records(10_000, 4, 2);
    c.bench_function("aggregate_report 10k records k=4", |b| {
        b.iter(|| render_markdown(&aggregate_report(black_box(&recs), Some(4))))
    });
}

fn grpo(c: &mut Criterion) {
    let cfg = GrpoConfig::v2(8);
    let gs = groups(1_000, 8, 3);
    c.bench_function("advantages+filter+loss+grad 1000 groups", |b| {
        b.iter(|| {
            let with_adv: Vec<_> = gs.iter().cloned().map(|g| g.with_advantages(cfg.advantage_epsilon).unwrap()).collect();
            let (kept, _) = dynamic_sampling_filter(with_adv);
            kept.iter()
                .map(|g| grpo_loss(g, &cfg).unwrap() + grpo_loss_gradient(g, &cfg).unwrap()[0])
                .sum::<f64>()
        })
    });
}

fn prompting(c: &mut Criterion) {
    let ss = samples(1_000);
    c.bench_function("two-step transcripts x1000", |b| {
        b.iter(|| {
            ss.iter()
                .map(|s| {
                    let r1 = build_scene_graph_step(s);
                    let r2 = build_answer_step(s, "{\"objects\": []}").unwrap();
                    r1.sha256().len() + r2.messages.len()
                })
                .sum::<usize>()
        })
    });
}

criterion_group!(benches, extraction, metrics, grpo, prompting);
criterion_main!(benches);
