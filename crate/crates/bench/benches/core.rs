use criterion::{black_box, criterion_group, criterion_main, Criterion};

use vipt_bench::{toy_model, toy_pairs};
use vipt_core::objective::LossWeights;
use vipt_core::synthdata::{gen_sequence, SceneSpec};
use vipt_core::tensor::{Tape, Tensor};

fn bench_matmul(c: &mut Criterion) {
    let a = Tensor::from_fn(&[80, 64], |i| (i % 17) as f64 * 0.1 - 0.8);
    let b = Tensor::from_fn(&[64, 256], |i| (i % 13) as f64 * 0.07 - 0.4);
    c.bench_function("tape_matmul_80x64x256", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let av = tape.leaf(&a, false);
            let bv = tape.leaf(&b, false);
            black_box(tape.matmul(av, bv).unwrap());
        })
    });
}

fn bench_forward(c: &mut Criterion) {
    let model = toy_model();
    let pairs = toy_pairs(4);
    c.bench_function("prompted_forward_toy", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            black_box(model.forward_pair(&mut tape, &pairs[0]).unwrap());
        })
    });
}

fn bench_forward_backward(c: &mut Criterion) {
    let model = toy_model();
    let pairs = toy_pairs(4);
    let weights = LossWeights::default();
    c.bench_function("prompted_forward_backward_toy", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let parts = model.loss_on_pair(&mut tape, &pairs[0], &weights).unwrap();
            tape.backward(parts.total).unwrap();
            black_box(tape.grad(parts.total));
        })
    });
}

fn bench_scene_generation(c: &mut Criterion) {
    let spec = SceneSpec {
        seed: 5,
        num_frames: 20,
        canvas: (96, 96),
        rgb_corruption_rate: 0.5,
        ..SceneSpec::default()
    };
    c.bench_function("gen_sequence_20_frames", |bench| {
        bench.iter(|| black_box(gen_sequence(&spec).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_forward,
    bench_forward_backward,
    bench_scene_generation
);
criterion_main!(benches);
