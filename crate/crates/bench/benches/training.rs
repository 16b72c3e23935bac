use cqvqa_core::data::{generate_synthetic, DatasetDims, SyntheticSpec};
use cqvqa_core::optim::{adamax_step, AdamaxState};
use cqvqa_core::{
    build_answer_space, Dataset, EmbeddingTable, Model, ModelDims, ModelKind, Precision,
    RoutingMode, Sample, Tape,
};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

struct Setup {
    _dir: tempfile::TempDir,
    data: Dataset<f32>,
    emb: EmbeddingTable<f32>,
    model: Model<f32>,
}

fn setup() -> Setup {
    let dims = DatasetDims {
        k: 4,
        d_v: 16,
        d_w: 8,
        n_w: 6,
    };
    let dir = tempfile::tempdir().unwrap();
    let mut gen = generate_synthetic(&SyntheticSpec::uniform(4, 3, 32, dims, 7)).unwrap();
    let manifest = gen.write(dir.path(), Precision::F32).unwrap();
    let data = Dataset::<f32>::load(&manifest).unwrap();
    let emb = EmbeddingTable::load(&dir.path().join("embeddings.bin")).unwrap();
    let space = build_answer_space(
        &data.categories,
        data.samples.iter().map(|s| (s.category, s.answer.as_str())),
    )
    .unwrap();
    let model_dims = ModelDims {
        k: 4,
        d_v: 16,
        d_w: 8,
        d_q: 32,
        d_f: 32,
        n_w: 6,
        n_c: 4,
        h_cq: 32,
        h_ap: 32,
    };
    let model = Model::init(model_dims, space, ModelKind::Hierarchical, 7).unwrap();
    Setup {
        _dir: dir,
        data,
        emb,
        model,
    }
}

fn step(
    model: &mut Model<f32>,
    emb: &EmbeddingTable<f32>,
    batch: &[&Sample<f32>],
    state: &mut AdamaxState<f32>,
) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape).unwrap();
    let fwd = model.forward(&mut tape, &bound, emb, batch).unwrap();
    let terms = model
        .loss(&mut tape, &bound, &fwd, batch, RoutingMode::TeacherForced)
        .unwrap();
    tape.backward(terms.total).unwrap();
    model.accumulate_grads(&tape, &bound).unwrap();
    adamax_step(&mut model.params_mut(), state, 0.002).unwrap();
    model.zero_grad();
}

fn benches(c: &mut Criterion) {
    let s = setup();
    let batch: Vec<&Sample<f32>> = s.data.samples.iter().take(32).collect();

    c.bench_function("forward batch 32", |b| {
        b.iter(|| s.model.predict_batch(&s.emb, &batch).unwrap())
    });

    c.bench_function("train step batch 32", |b| {
        b.iter_batched(
            || {
                let mut m = s.model.clone();
                let state = AdamaxState::new(&m.params_mut());
                (m, state)
            },
            |(mut m, mut state)| step(&mut m, &s.emb, &batch, &mut state),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(training, benches);
criterion_main!(training);
