//! Sequential versus data-parallel benchmark runs, over the replay corpus and
//! over a scripted backend with simulated request latency.

use std::hint::black_box;
use std::thread;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use lensaudit::ingest::load_dataset;
use lensaudit::llm::{Backend, ChatRequest, FnBackend, ReplayBackend, ReplayStore};
use lensaudit::strategies::{run_benchmark, Competitor};
use lensaudit::RunConfig;
use lensaudit_fixtures::{corpus_config, fixtures_dir, HitTable, ScriptedBackend, CORPUS, MANIFEST, TABLE};

const LATENCY: Duration = Duration::from_millis(2);
const IO_THREADS: usize = 8;

fn configs() -> [(&'static str, RunConfig); 2] {
    [
        (
            "sequential",
            RunConfig {
                parallel: false,
                ..corpus_config()
            },
        ),
        (
            "parallel",
            RunConfig {
                parallel: true,
                ..corpus_config()
            },
        ),
    ]
}

fn replay_corpus(c: &mut Criterion) {
    let dir = fixtures_dir();
    let cases = load_dataset(dir.join(MANIFEST)).unwrap();
    let store = ReplayStore::load(dir.join(CORPUS)).unwrap();
    let competitors = Competitor::table_six();
    let mut group = c.benchmark_group("replay_corpus");
    for (name, config) in configs() {
        group.bench_function(name, |b| {
            b.iter_batched(
                || ReplayBackend::new(store.clone()),
                |backend| black_box(run_benchmark(&cases, &competitors, &config, &backend)),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn simulated_latency(c: &mut Criterion) {
    let dir = fixtures_dir();
    let cases = load_dataset(dir.join(MANIFEST)).unwrap();
    let scripted = ScriptedBackend::new(HitTable::load(&dir.join(TABLE)).unwrap(), 0);
    let backend = FnBackend(move |req: &ChatRequest| {
        thread::sleep(LATENCY);
        scripted.complete(req)
    });
    let competitors = ["A+C(n2m3)".parse::<Competitor>().unwrap()];
    let pool = rayon::ThreadPoolBuilder::new().num_threads(IO_THREADS).build().unwrap();
    let mut group = c.benchmark_group("simulated_latency");
    group.sample_size(10);
    for (name, config) in configs() {
        group.bench_function(name, |b| {
            b.iter(|| pool.install(|| black_box(run_benchmark(&cases, &competitors, &config, &backend))))
        });
    }
    group.finish();
}

criterion_group!(benches, replay_corpus, simulated_latency);
criterion_main!(benches);
