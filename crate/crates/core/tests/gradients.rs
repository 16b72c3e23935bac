//! Central finite-difference checks of every trainable stage at f64.

mod common;

use common::*;
use cqvqa_core::data::{DatasetDims, SyntheticSpec};
use cqvqa_core::{Model, ModelKind, RoutingMode, Sample, Tape};

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
/// Denominator floor so that gradients near zero are compared absolutely.
const FLOOR: f64 = 1e-6;
const PROBES_PER_TENSOR: usize = 8;

struct Fixture {
    model: Model<f64>,
    loaded: Loaded<f64>,
}

fn fixture(kind: ModelKind, seed: u64) -> Fixture {
    let d = toy_dims();
    let spec = SyntheticSpec {
        answers_per_category: vec![2, 3],
        ..SyntheticSpec::uniform(
            2,
            2,
            3,
            DatasetDims {
                k: d.k,
                d_v: d.d_v,
                d_w: d.d_w,
                n_w: d.n_w,
            },
            seed,
        )
    };
    let loaded = synthetic::<f64>(&spec);
    assert_eq!(loaded.space.subset_sizes(), vec![2, 3]);
    let model = Model::init(d, loaded.space.clone(), kind, seed).unwrap();
    Fixture { model, loaded }
}

fn batch(f: &Fixture) -> Vec<&Sample<f64>> {
    f.loaded.data.samples.iter().collect()
}

/// Analytic gradients, one vector per parameter tensor, plus names.
fn analytic(f: &mut Fixture, mode: RoutingMode) -> Vec<(String, Vec<f64>)> {
    let b: Vec<Sample<f64>> = f.loaded.data.samples.clone();
    let refs: Vec<&Sample<f64>> = b.iter().collect();
    let mut tape = Tape::new();
    let bound = f.model.bind(&mut tape).unwrap();
    let fwd = f
        .model
        .forward(&mut tape, &bound, &f.loaded.emb, &refs)
        .unwrap();
    let terms = f.model.loss(&mut tape, &bound, &fwd, &refs, mode).unwrap();
    tape.backward(terms.total).unwrap();
    f.model.zero_grad();
    f.model.accumulate_grads(&tape, &bound).unwrap();
    let out = f
        .model
        .named_params()
        .into_iter()
        .map(|(n, t)| {
            let g = t.grad().map_or(vec![0.0; t.numel()], <[f64]>::to_vec);
            (n, g)
        })
        .collect();
    f.model.zero_grad();
    out
}

/// Loss and the predictor each sample was routed to.
fn loss(f: &Fixture, mode: RoutingMode) -> (f64, Vec<usize>) {
    let refs = batch(f);
    let mut tape = Tape::new();
    let bound = f.model.bind(&mut tape).unwrap();
    let fwd = f
        .model
        .forward(&mut tape, &bound, &f.loaded.emb, &refs)
        .unwrap();
    let terms = f.model.loss(&mut tape, &bound, &fwd, &refs, mode).unwrap();
    (tape.value(terms.total)[0], terms.routes)
}

/// Checks every tensor whose name starts with `prefix`; returns the number of probes.
fn check(kind: ModelKind, mode: RoutingMode, prefix: &str) -> usize {
    let (mut probes, mut skipped) = (0, 0);
    for seed in [3, 17] {
        let mut f = fixture(kind, seed);
        let grads = analytic(&mut f, mode);
        for (i, (name, g)) in grads.iter().enumerate() {
            if !name.starts_with(prefix) {
                continue;
            }
            let n = g.len();
            let picks: Vec<usize> = if n <= PROBES_PER_TENSOR {
                (0..n).collect()
            } else {
                (0..PROBES_PER_TENSOR)
                    .map(|j| (j * 7919 + seed as usize) % n)
                    .collect()
            };
            for j in picks {
                let orig = f.model.params_mut()[i].data()[j];
                f.model.params_mut()[i].data_mut()[j] = orig + STEP;
                let (up, up_routes) = loss(&f, mode);
                f.model.params_mut()[i].data_mut()[j] = orig - STEP;
                let (down, down_routes) = loss(&f, mode);
                f.model.params_mut()[i].data_mut()[j] = orig;
                // Arg-max routing is piecewise constant; a probe that flips a
                // route straddles a jump and has no derivative to compare.
                if up_routes != down_routes {
                    skipped += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * STEP);
                let err = (g[j] - numeric).abs() / g[j].abs().max(numeric.abs()).max(FLOOR);
                assert!(
                    err < TOLERANCE,
                    "{name}[{j}] seed {seed}: analytic {} numeric {numeric} rel err {err:e}",
                    g[j]
                );
                probes += 1;
            }
        }
    }
    assert!(probes > 0, "no parameters matched {prefix}");
    assert!(
        skipped * 10 <= probes,
        "{skipped} of {} probes crossed a routing boundary",
        probes + skipped
    );
    probes
}

#[test]
fn lstm_gates() {
    for gate in ["input", "forget", "cell", "output"] {
        check(
            ModelKind::Hierarchical,
            RoutingMode::TeacherForced,
            &format!("lstm.{gate}"),
        );
    }
}

#[test]
fn visual_projection() {
    check(
        ModelKind::Hierarchical,
        RoutingMode::TeacherForced,
        "fusion.visual",
    );
}

#[test]
fn question_projection() {
    check(
        ModelKind::Hierarchical,
        RoutingMode::TeacherForced,
        "fusion.question",
    );
}

#[test]
fn attention_scorer() {
    check(
        ModelKind::Hierarchical,
        RoutingMode::TeacherForced,
        "fusion.score",
    );
}

#[test]
fn categorizer() {
    check(
        ModelKind::Hierarchical,
        RoutingMode::TeacherForced,
        "categorizer",
    );
}

#[test]
fn each_predictor() {
    check(
        ModelKind::Hierarchical,
        RoutingMode::TeacherForced,
        "predictor.0",
    );
    check(
        ModelKind::Hierarchical,
        RoutingMode::TeacherForced,
        "predictor.1",
    );
}

#[test]
fn full_objective_every_tensor() {
    check(ModelKind::Hierarchical, RoutingMode::TeacherForced, "");
}

#[test]
fn full_objective_predicted_routing() {
    check(ModelKind::Hierarchical, RoutingMode::Predicted, "");
}

#[test]
fn flat_baseline() {
    check(ModelKind::Flat, RoutingMode::TeacherForced, "");
}
