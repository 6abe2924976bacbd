use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use reinformer::autodiff::Tape;
use reinformer::training::total_step_loss;
use reinformer_bench::{maze_batch, maze_model, maze_trainer, random_matrix};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = random_matrix(960, n, 1);
        let b = random_matrix(n, n, 2);
        group.bench_function(format!("960x{n}x{n}"), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, y) = (tape.leaf(&a), tape.leaf(&b));
                tape.matmul(x, y).unwrap()
            })
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let model = maze_model();
    let batch = maze_batch(&model, 64);
    let mut group = c.benchmark_group("model");
    group.bench_function("forward_b64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let vars = model.params().bind(&mut tape);
            model.forward_tape(&mut tape, &vars, &batch).unwrap();
        })
    });
    group.bench_function("forward_backward_b64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let vars = model.params().bind(&mut tape);
            let out = model.forward_tape(&mut tape, &vars, &batch).unwrap();
            let loss = total_step_loss(&mut tape, &out, &batch, 0.1, 0.99, 1.0).unwrap();
            tape.backward(loss.total).unwrap();
        })
    });
    group.finish();
}

fn train_step(c: &mut Criterion) {
    c.bench_function("train_step_maze_b64", |bench| {
        bench.iter_batched_ref(maze_trainer, |t| t.train_step().unwrap(), BatchSize::LargeInput)
    });
}

criterion_group!(benches, matmul, model, train_step);
criterion_main!(benches);
