use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use opsc_core::autodiff::{ParamStore, Tape, Tensor};
use opsc_core::corpus::{ClfBatch, ClfExample, Truncate};
use opsc_core::disasm::{disassemble_bytes, load_opcode_table, DisasmOptions};
use opsc_core::metrics::{report, ConfusionMatrix};
use opsc_core::model::{lstm_cell_step, Mode, Model, ModelConfig, ModelKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::<f32>::uniform(16, 64, 1.0, &mut rng), 0).unwrap();
    let b = store.add("b", Tensor::<f32>::uniform(64, 256, 1.0, &mut rng), 0).unwrap();
    c.bench_function("matmul 16x64 * 64x256 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::<f32>::new();
            let (av, bv) = (tape.param(&store, a), tape.param(&store, b));
            let y = tape.matmul(av, bv).unwrap();
            let loss = tape.sum(y);
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn lstm_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (batch, hidden) = (16, 64);
    let x = Tensor::<f32>::uniform(batch, hidden, 1.0, &mut rng);
    let h = Tensor::<f32>::uniform(batch, hidden, 1.0, &mut rng);
    let w_ih = Tensor::<f32>::uniform(hidden, 4 * hidden, 0.1, &mut rng);
    let w_hh = Tensor::<f32>::uniform(hidden, 4 * hidden, 0.1, &mut rng);
    let bias = Tensor::<f32>::zeros(1, 4 * hidden);
    c.bench_function("lstm step batch 16 hidden 64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::<f32>::new();
            let xv = tape.constant(x.clone());
            let hv = tape.constant(h.clone());
            let cv = tape.constant(h.clone());
            let wi = tape.constant(w_ih.clone());
            let wh = tape.constant(w_hh.clone());
            let bv = tape.constant(bias.clone());
            black_box(lstm_cell_step(&mut tape, xv, hv, cv, wi, wh, bv).unwrap());
        })
    });
}

fn classifier_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Model::<f32>::new(ModelConfig::desk(60), ModelKind::Clf, [0; 32], &mut rng).unwrap();
    let examples: Vec<ClfExample> = (0..16)
        .map(|i| ClfExample {
            ids: (0..120).map(|_| rng.gen_range(4..60)).collect(),
            label: i % 4,
        })
        .collect();
    let refs: Vec<&ClfExample> = examples.iter().collect();
    let batch = ClfBatch::from_examples(&refs, (0..16).collect(), 400, Truncate::Head);
    c.bench_function("classifier fwd+bwd batch 16 len 120", |bench| {
        bench.iter_batched(
            || ChaCha8Rng::seed_from_u64(4),
            |mut r| {
                let mut tape = Tape::<f32>::new();
                let out = model.clf_forward(&mut tape, &batch, Mode::Train(&mut r)).unwrap();
                black_box(tape.backward(out.loss).unwrap());
            },
            BatchSize::SmallInput,
        )
    });
}

fn disassemble(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let code: Vec<u8> = (0..24_576).map(|_| rng.gen()).collect();
    let table = load_opcode_table();
    c.bench_function("disassemble 24 KiB", |bench| {
        bench.iter(|| black_box(disassemble_bytes(&code, table, DisasmOptions::default())))
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 6131;
    let actual: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=4)).collect();
    let probs: Vec<[f64; 4]> = (0..n)
        .map(|_| {
            let p: [f64; 4] = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
            let s: f64 = p.iter().sum();
            p.map(|v| v / s)
        })
        .collect();
    let cm = ConfusionMatrix::from_counts([[648, 4, 3, 215], [59, 42, 0, 119], [1, 0, 135, 45], [78, 18, 5, 4759]]);
    c.bench_function("metrics report with ROC, n 6131", |bench| {
        bench.iter(|| black_box(report(&cm, Some((&probs, &actual)), 1.0).unwrap()))
    });
}

criterion_group!(benches, matmul, lstm_step, classifier_step, disassemble, metrics);
criterion_main!(benches);
