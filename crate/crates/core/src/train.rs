//! Mini-batch training of every trainable stage.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::encoders::EmbeddingTable;
use crate::error::{Error, Result};
use crate::hier::RoutingMode;
use crate::model::Model;
use crate::optim::{adamax_step, AdamaxState, LrSchedule};
use crate::tape::Tape;
use crate::tensor::Scalar;

/// Keeps the shuffle stream apart from the initialization stream of the same seed.
const SHUFFLE_STREAM: u64 = 0x5eed_5bf1_e000_0001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub routing: RoutingMode,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_q: f64,
    pub l_aa: f64,
    pub miss_rate: f64,
    /// Level-1 accuracy, percent; absent for the flat head.
    pub category_accuracy: Option<f64>,
    pub answer_accuracy: f64,
}

#[derive(Default)]
struct Totals {
    loss: f64,
    l_q: f64,
    l_aa: f64,
    misses: usize,
    category_hits: usize,
    answer_hits: usize,
    seen: usize,
}

/// Trains `model` in place, calling `on_epoch` after every epoch.
///
/// Each epoch shuffles the samples with a seeded Fisher–Yates pass and keeps
/// the final partial batch. Each batch runs forward, the mean loss, backward,
/// one Adamax step and a gradient reset. Embeddings are never updated.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    emb: &EmbeddingTable<T>,
    samples: &[Sample<T>],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Config(
            "epochs and batch size must be positive".into(),
        ));
    }
    let hierarchical = matches!(model.kind(), crate::model::ModelKind::Hierarchical);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut state = AdamaxState::new(&model.params_mut());
    let mut logs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut totals = Totals::default();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &samples[i]).collect();
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Divergence { epoch, batch: b },
                other => other,
            };
            let mut tape = Tape::new();
            // Parameters pushed past the float range by the previous step fail here.
            let bound = model.bind(&mut tape).map_err(diverged)?;
            let fwd = model
                .forward(&mut tape, &bound, emb, &batch)
                .map_err(diverged)?;
            let terms = model
                .loss(&mut tape, &bound, &fwd, &batch, config.routing)
                .map_err(diverged)?;
            let total = tape.value(terms.total)[0];
            if !total.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }

            let predictions = model.predictions_from(&mut tape, &bound, &fwd)?;
            for (s, p) in batch.iter().zip(&predictions) {
                totals.category_hits += usize::from(p.category == Some(s.category));
                totals.answer_hits += usize::from(model.space.answer(p.answer) == s.answer);
            }

            tape.backward(terms.total)?;
            model.accumulate_grads(&tape, &bound)?;
            adamax_step(&mut model.params_mut(), &mut state, lr)?;
            model.zero_grad();

            let n = batch.len() as f64;
            let f = |v: T| v.to_f64().expect("float") * n;
            totals.loss += f(total);
            totals.l_q += f(tape.value(terms.l_q)[0]);
            totals.l_aa += f(tape.value(terms.l_aa)[0]);
            totals.misses += terms.misses;
            totals.seen += batch.len();
        }
        let n = totals.seen as f64;
        let log = EpochLog {
            epoch,
            lr,
            loss: totals.loss / n,
            l_q: totals.l_q / n,
            l_aa: totals.l_aa / n,
            miss_rate: totals.misses as f64 / n,
            category_accuracy: hierarchical.then(|| 100.0 * totals.category_hits as f64 / n),
            answer_accuracy: 100.0 * totals.answer_hits as f64 / n,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}
