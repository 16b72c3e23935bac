//! Randomized invariants of routing, attention, the loss and the metrics.

mod common;

use common::*;
use cqvqa_core::attention::{attend_and_fuse, FusionParams};
use cqvqa_core::data::SyntheticSpec;
use cqvqa_core::metrics::{arithmetic_mpt, harmonic_mpt};
use cqvqa_core::model::loss_total;
use cqvqa_core::{Model, ModelKind, RoutingMode, Sample, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Which predictors received any nonzero gradient, and whether every other
/// predictor's gradient is exactly zero.
fn predictor_grads(
    model: &mut Model<f64>,
    emb: &cqvqa_core::EmbeddingTable<f64>,
    batch: &[&Sample<f64>],
    mode: RoutingMode,
) -> (Vec<usize>, Vec<usize>) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape).unwrap();
    let fwd = model.forward(&mut tape, &bound, emb, batch).unwrap();
    let terms = model.loss(&mut tape, &bound, &fwd, batch, mode).unwrap();
    tape.backward(terms.total).unwrap();
    model.zero_grad();
    model.accumulate_grads(&tape, &bound).unwrap();
    let n_c = model.dims.n_c;
    let mut touched = Vec::new();
    for r in 0..n_c {
        let prefix = format!("predictor.{r}.");
        let nonzero = model
            .named_params()
            .iter()
            .filter(|(n, _)| n.starts_with(&prefix))
            .any(|(_, t)| {
                t.grad()
                    .is_some_and(|g| g.iter().any(|&v| v.to_bits() != 0))
            });
        if nonzero {
            touched.push(r);
        }
    }
    model.zero_grad();
    let mut routed = terms.routes.clone();
    routed.sort_unstable();
    routed.dedup();
    (touched, routed)
}

fn routing_fixture(seed: u64) -> (Model<f64>, Loaded<f64>) {
    let mut dims = toy_dims();
    dims.n_c = 3;
    let spec = SyntheticSpec::uniform(
        3,
        2,
        22,
        cqvqa_core::DatasetDims {
            k: dims.k,
            d_v: dims.d_v,
            d_w: dims.d_w,
            n_w: dims.n_w,
        },
        seed,
    );
    let l = synthetic::<f64>(&spec);
    let model = Model::init(dims, l.space.clone(), ModelKind::Hierarchical, seed).unwrap();
    (model, l)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn one_predictor_per_sample(seed in 0u64..1_000_000) {
        let (mut model, l) = routing_fixture(seed);
        let batch: Vec<&Sample<f64>> = l.data.samples.iter().take(64).collect();
        prop_assert_eq!(batch.len(), 64);
        for s in &batch {
            let (touched, _) = predictor_grads(&mut model, &l.emb, &[*s], RoutingMode::TeacherForced);
            prop_assert_eq!(touched, vec![s.category]);
        }
        for mode in [RoutingMode::TeacherForced, RoutingMode::Predicted] {
            let (touched, routed) = predictor_grads(&mut model, &l.emb, &batch, mode);
            if mode == RoutingMode::TeacherForced {
                prop_assert_eq!(&touched, &routed);
            } else {
                // A miss contributes nothing, so touched ⊆ routed.
                prop_assert!(touched.iter().all(|r| routed.contains(r)));
            }
        }
    }
}

#[test]
fn attention_weights_sum_to_one_and_ignore_region_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let k = rng.random_range(1..=8);
        let d_f = rng.random_range(1..=6);
        let params = FusionParams::<f64>::init(&mut rng, 2, 2, d_f);
        let scale = rng.random_range(0.1..10.0);
        let v: Vec<f64> = (0..k * d_f)
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect();
        let q: Vec<f64> = (0..d_f)
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect();
        let v_t = Tensor::new([k, d_f], v.clone()).unwrap();
        let q_t = Tensor::new([d_f], q).unwrap();
        let out = attend_and_fuse(&v_t, &q_t, &params).unwrap();
        let sum: f64 = out.scores.data().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6, "scores sum to {sum}");

        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<f64> = perm
            .iter()
            .flat_map(|&r| v[r * d_f..(r + 1) * d_f].to_vec())
            .collect();
        let again =
            attend_and_fuse(&Tensor::new([k, d_f], shuffled).unwrap(), &q_t, &params).unwrap();
        for (a, b) in out.fused.data().iter().zip(again.fused.data()) {
            assert!(
                (a - b).abs() <= 1e-6,
                "fused changed under permutation: {a} vs {b}"
            );
        }
    }
}

#[test]
fn total_loss_is_exact_sum_per_sample() {
    let (model, l) = routing_fixture(9);
    for mode in [RoutingMode::TeacherForced, RoutingMode::Predicted] {
        for s in &l.data.samples {
            let v = loss_total(&model, &l.emb, &[s], mode).unwrap();
            assert_eq!(v.total, v.l_q + v.l_aa);
        }
    }
}

fn accuracy_vector() -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        prop::collection::vec(0.01f64..=100.0, 1..16),
        (0.01f64..=100.0, 1usize..16).prop_map(|(a, n)| vec![a; n]),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn harmonic_never_exceeds_arithmetic(acc in accuracy_vector()) {
        let am = arithmetic_mpt(&acc).unwrap();
        let hm = harmonic_mpt(&acc).unwrap();
        prop_assert!(hm <= am + 1e-9, "hm {} > am {}", hm, am);
        let constant = acc.iter().all(|&a| a == acc[0]);
        if constant {
            prop_assert!((am - hm).abs() <= 1e-9);
        } else {
            prop_assert!(am - hm > 1e-9, "equal means on non-constant {:?}", acc);
        }
    }
}
