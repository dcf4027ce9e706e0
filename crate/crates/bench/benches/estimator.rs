use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use cola_core::bleu::self_bleu;
use cola_core::estimator::{matched_set, propensity_values};
use cola_core::event::{split_counts, Event, EventSequence, Split};
use cola_core::task::{random_baseline_expectation, rank_and_label};

fn vectors(rng: &mut ChaCha8Rng, n: usize, len: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..len).map(|_| rng.random::<f64>()).collect()).collect()
}

fn matching(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // 40 covariates, 50 interventions: the default pipeline shape
    let treatment = vectors(&mut rng, 1, 40).remove(0);
    let candidates = vectors(&mut rng, 50, 40);
    c.bench_function("matched_set 40x50", |b| {
        b.iter(|| matched_set(black_box(&treatment), black_box(&candidates), 0.01).unwrap())
    });
    let joint = vectors(&mut rng, 1, 40).remove(0);
    let marginal = vectors(&mut rng, 1, 40).remove(0);
    c.bench_function("propensity 40 normalized", |b| {
        b.iter(|| propensity_values(black_box(&joint), black_box(&marginal), true).unwrap())
    });
}

fn diversity(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let words = ["she", "went", "to", "the", "store", "and", "bought", "milk", "he", "ran", "home", "late"];
    let texts: Vec<String> = (0..40)
        .map(|_| (0..10).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" "))
        .collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    c.bench_function("self_bleu 40 texts", |b| b.iter(|| self_bleu(black_box(&refs), 4).unwrap()));
}

fn ranking(c: &mut Criterion) {
    let data: Vec<EventSequence> = (0..340)
        .map(|s| {
            let events = (0..5).map(|i| Event::new(format!("event {s} {i}")).unwrap()).collect();
            EventSequence::new(s.to_string(), events, (0..4).map(|i| i < s % 4).collect(), Split::Testing)
                .unwrap()
        })
        .collect();
    let counts = split_counts(&data).unwrap();
    c.bench_function("random baseline expectation", |b| {
        b.iter(|| random_baseline_expectation(black_box(&counts)).unwrap())
    });
    c.bench_function("rank_and_label 340 sequences", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(2),
            |mut rng| {
                for seq in &data {
                    let scores: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
                    black_box(rank_and_label(seq, &scores).unwrap());
                }
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, matching, diversity, ranking);
criterion_main!(benches);
