//! The full network: question encoder, attention fusion and an answering head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{BoundFusion, FusionParams};
use crate::data::Sample;
use crate::encoders::{BoundLstm, EmbeddingTable, LstmParams};
use crate::error::{Error, Result};
use crate::hier::{
    routed_answer_loss, select_routes, AnswerSpace, PredictorParams, RoutedLoss, RoutingMode,
};
use crate::nn::{BoundMlp, Mlp};
use crate::ops::argmax;
use crate::tape::{softmax_in_place, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Every size the network is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub k: usize,
    pub d_v: usize,
    pub d_w: usize,
    pub d_q: usize,
    pub d_f: usize,
    pub n_w: usize,
    pub n_c: usize,
    pub h_cq: usize,
    pub h_ap: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.k, self.d_v, self.d_w, self.d_q, self.d_f, self.n_w, self.n_c, self.h_cq,
            self.h_ap,
        ];
        if all.contains(&0) {
            return Err(Error::Config(format!(
                "all dims must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Hierarchical,
    Flat,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head<T> {
    Hierarchical {
        categorizer: Mlp<T>,
        predictors: PredictorParams<T>,
    },
    Flat(Mlp<T>),
}

#[derive(Debug, Clone)]
pub enum BoundHead {
    Hierarchical {
        categorizer: BoundMlp,
        predictors: Vec<BoundMlp>,
    },
    Flat(BoundMlp),
}

/// Parameters recorded on one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub lstm: BoundLstm,
    pub fusion: BoundFusion,
    pub head: BoundHead,
}

impl BoundModel {
    /// Leaf variables in the same order as [`Model::params_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.lstm.vars(&mut out);
        self.fusion.vars(&mut out);
        match &self.head {
            BoundHead::Hierarchical {
                categorizer,
                predictors,
            } => {
                categorizer.vars(&mut out);
                predictors.iter().for_each(|p| p.vars(&mut out));
            }
            BoundHead::Flat(flat) => flat.vars(&mut out),
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub dims: ModelDims,
    pub space: AnswerSpace,
    pub lstm: LstmParams<T>,
    pub fusion: FusionParams<T>,
    pub head: Head<T>,
}

/// Forward values recorded for a batch.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub scores: Var,
    pub fused: Var,
    /// Category logits (hierarchical) or answer logits (flat), `[b × ·]`.
    pub logits: Var,
}

/// Training objective for one batch.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    /// Categorizer loss; zero constant for the flat head.
    pub l_q: Var,
    /// Routed answer loss, or the flat head's cross-entropy.
    pub l_aa: Var,
    pub misses: usize,
    pub routes: Vec<usize>,
}

/// Inference output for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    /// Category distribution; `None` for the flat head.
    pub p_q: Option<Vec<T>>,
    pub category: Option<usize>,
    /// Distribution over the chosen predictor's subset (or all answers when flat).
    pub answer_probs: Vec<T>,
    pub answer: usize,
}

impl<T: Scalar> Model<T> {
    /// Seeded initialization. The encoder and fusion stages are drawn first,
    /// so both head kinds share them for a given seed.
    pub fn init(dims: ModelDims, space: AnswerSpace, kind: ModelKind, seed: u64) -> Result<Self> {
        dims.validate()?;
        if space.n_c() != dims.n_c {
            return Err(Error::DimensionMismatch {
                what: "categories in answer space vs n_c".into(),
                expected: dims.n_c,
                found: space.n_c(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lstm = LstmParams::init(&mut rng, dims.d_w, dims.d_q);
        let fusion = FusionParams::init(&mut rng, dims.d_v, dims.d_q, dims.d_f);
        let head = match kind {
            ModelKind::Hierarchical => Head::Hierarchical {
                categorizer: Mlp::init(&mut rng, dims.d_f, dims.h_cq, dims.n_c),
                predictors: PredictorParams::init(&mut rng, dims.d_f, dims.h_ap, &space),
            },
            ModelKind::Flat => Head::Flat(Mlp::init(&mut rng, dims.d_f, dims.h_ap, space.len())),
        };
        Ok(Model {
            dims,
            space,
            lstm,
            fusion,
            head,
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self.head {
            Head::Hierarchical { .. } => ModelKind::Hierarchical,
            Head::Flat(_) => ModelKind::Flat,
        }
    }

    /// Named parameters in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.lstm.visit(&mut out);
        self.fusion.visit(&mut out);
        match &self.head {
            Head::Hierarchical {
                categorizer,
                predictors,
            } => {
                categorizer.visit("categorizer", &mut out);
                for (r, p) in predictors.heads.iter().enumerate() {
                    p.visit(&format!("predictor.{r}"), &mut out);
                }
            }
            Head::Flat(flat) => flat.visit("flat", &mut out),
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.lstm.visit_mut(&mut out);
        self.fusion.visit_mut(&mut out);
        match &mut self.head {
            Head::Hierarchical {
                categorizer,
                predictors,
            } => {
                categorizer.visit_mut(&mut out);
                predictors
                    .heads
                    .iter_mut()
                    .for_each(|p| p.visit_mut(&mut out));
            }
            Head::Flat(flat) => flat.visit_mut(&mut out),
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BoundModel> {
        let lstm = self.lstm.bind(tape)?;
        let fusion = self.fusion.bind(tape)?;
        let head = match &self.head {
            Head::Hierarchical {
                categorizer,
                predictors,
            } => BoundHead::Hierarchical {
                categorizer: categorizer.bind(tape)?,
                predictors: predictors.bind(tape)?,
            },
            Head::Flat(flat) => BoundHead::Flat(flat.bind(tape)?),
        };
        Ok(BoundModel { lstm, fusion, head })
    }

    /// Adds the tape's leaf gradients into the parameter gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &BoundModel) -> Result<()> {
        let vars = bound.vars();
        let params = self.params_mut();
        debug_assert_eq!(vars.len(), params.len());
        for (p, v) in params.into_iter().zip(vars) {
            if let Some(g) = tape.grad(v) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    fn check_sample(&self, s: &Sample<T>) -> Result<()> {
        let d = &self.dims;
        if s.tokens.len() != d.n_w {
            return Err(Error::DimensionMismatch {
                what: "question length n_w".into(),
                expected: d.n_w,
                found: s.tokens.len(),
            });
        }
        if s.regions.k() != d.k || s.regions.d_v() != d.d_v {
            return Err(Error::DimensionMismatch {
                what: "region features k×d_v".into(),
                expected: d.k * d.d_v,
                found: s.regions.k() * s.regions.d_v(),
            });
        }
        Ok(())
    }

    /// Encodes, attends and fuses a batch, then evaluates the first-level
    /// head (categorizer or flat classifier).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        emb: &EmbeddingTable<T>,
        batch: &[&Sample<T>],
    ) -> Result<Forward> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = &self.dims;
        let mut regions = Vec::with_capacity(batch.len() * d.k * d.d_v);
        for s in batch {
            self.check_sample(s)?;
            regions.extend_from_slice(s.regions.tensor().data());
        }
        let questions: Vec<&[usize]> = batch.iter().map(|s| s.tokens.as_slice()).collect();
        let f_q = bound.lstm.encode(tape, emb, &questions)?;
        let regions = tape.constant_raw(vec![batch.len() * d.k, d.d_v], regions)?;
        let (v, q) = bound.fusion.project(tape, regions, f_q)?;
        let (scores, fused) = bound.fusion.attend_and_fuse(tape, v, q, d.k)?;
        let logits = match &bound.head {
            BoundHead::Hierarchical { categorizer, .. } => categorizer.logits(tape, fused)?,
            BoundHead::Flat(flat) => flat.logits(tape, fused)?,
        };
        Ok(Forward {
            scores,
            fused,
            logits,
        })
    }

    /// Category probabilities per row, from recorded logits.
    pub fn category_probs(&self, tape: &Tape<T>, fwd: &Forward) -> Vec<T> {
        let mut p = tape.value(fwd.logits).to_vec();
        let n = *tape.shape(fwd.logits).last().expect("logits");
        p.chunks_mut(n).for_each(softmax_in_place);
        p
    }

    /// Total loss: categorizer cross-entropy plus routed answer loss, each a
    /// mean over the batch. The flat head uses its answer cross-entropy alone.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        fwd: &Forward,
        batch: &[&Sample<T>],
        mode: RoutingMode,
    ) -> Result<LossTerms> {
        let answers: Vec<Option<usize>> = batch
            .iter()
            .map(|s| self.space.answer_id(&s.answer))
            .collect();
        match &bound.head {
            BoundHead::Hierarchical { predictors, .. } => {
                let categories: Vec<usize> = batch.iter().map(|s| s.category).collect();
                for &c in &categories {
                    self.space.check_category(c)?;
                }
                let ce = tape.softmax_cross_entropy(fwd.logits, &categories)?;
                let l_q = tape.mean(ce)?;
                let p_q = self.category_probs(tape, fwd);
                let routes = select_routes(&p_q, self.dims.n_c, &categories, mode)?;
                let RoutedLoss {
                    loss: l_aa,
                    misses,
                    routes,
                    ..
                } = routed_answer_loss(
                    tape,
                    fwd.fused,
                    &routes,
                    &answers,
                    mode,
                    predictors,
                    &self.space,
                )?;
                let total = tape.add(l_q, l_aa)?;
                Ok(LossTerms {
                    total,
                    l_q,
                    l_aa,
                    misses,
                    routes,
                })
            }
            BoundHead::Flat(_) => {
                let targets = answers
                    .iter()
                    .enumerate()
                    .map(|(i, a)| {
                        a.ok_or_else(|| {
                            Error::InvalidArgument(format!(
                                "sample {i}: answer {:?} is not in the answer set",
                                batch[i].answer
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let ce = tape.softmax_cross_entropy(fwd.logits, &targets)?;
                let l_aa = tape.mean(ce)?;
                let l_q = tape.constant_raw(vec![], vec![T::zero()])?;
                let total = tape.add(l_q, l_aa)?;
                Ok(LossTerms {
                    total,
                    l_q,
                    l_aa,
                    misses: 0,
                    routes: Vec::new(),
                })
            }
        }
    }

    /// Inference for a batch using predicted routing only; never reads the
    /// samples' categories or answers.
    pub fn predict_batch(
        &self,
        emb: &EmbeddingTable<T>,
        batch: &[&Sample<T>],
    ) -> Result<Vec<Prediction<T>>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let fwd = self.forward(&mut tape, &bound, emb, batch)?;
        self.predictions_from(&mut tape, &bound, &fwd)
    }

    /// Reads predictions off an existing forward pass.
    pub fn predictions_from(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        fwd: &Forward,
    ) -> Result<Vec<Prediction<T>>> {
        let probs = self.category_probs(tape, fwd);
        match &bound.head {
            BoundHead::Flat(_) => {
                let n = self.space.len();
                Ok(probs
                    .chunks(n)
                    .map(|p| Prediction {
                        p_q: None,
                        category: None,
                        answer_probs: p.to_vec(),
                        answer: argmax(p).expect("non-empty answer set"),
                    })
                    .collect())
            }
            BoundHead::Hierarchical { predictors, .. } => {
                let n_c = self.dims.n_c;
                let routes = select_routes(&probs, n_c, &[], RoutingMode::Predicted)?;
                let mut out: Vec<Option<Prediction<T>>> = vec![None; routes.len()];
                for (r, predictor) in predictors.iter().enumerate() {
                    let rows: Vec<usize> = (0..routes.len()).filter(|&i| routes[i] == r).collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let x = tape.select_rows(fwd.fused, &rows)?;
                    let logits = predictor.logits(tape, x)?;
                    let p = tape.softmax_rows(logits)?;
                    let n_a = self.space.n_a(r);
                    for (row, p) in rows.iter().zip(tape.value(p).chunks(n_a)) {
                        let local = argmax(p).expect("non-empty subset");
                        out[*row] = Some(Prediction {
                            p_q: Some(probs[row * n_c..(row + 1) * n_c].to_vec()),
                            category: Some(r),
                            answer_probs: p.to_vec(),
                            answer: self.space.subset(r)[local],
                        });
                    }
                }
                Ok(out
                    .into_iter()
                    .map(|p| p.expect("every row routed"))
                    .collect())
            }
        }
    }

    pub fn predict(&self, emb: &EmbeddingTable<T>, sample: &Sample<T>) -> Result<Prediction<T>> {
        Ok(self.predict_batch(emb, &[sample])?.remove(0))
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let lstm = &self.lstm;
        let mlp = |m: &Mlp<T>| Mlp {
            hidden: crate::nn::Dense {
                weight: m.hidden.weight.cast(),
                bias: m.hidden.bias.cast(),
            },
            output: crate::nn::Dense {
                weight: m.output.weight.cast(),
                bias: m.output.bias.cast(),
            },
        };
        let dense = |d: &crate::nn::Dense<T>| crate::nn::Dense {
            weight: d.weight.cast(),
            bias: d.bias.cast(),
        };
        Model {
            dims: self.dims,
            space: self.space.clone(),
            lstm: LstmParams {
                w_input: lstm.w_input.cast(),
                w_forget: lstm.w_forget.cast(),
                w_cell: lstm.w_cell.cast(),
                w_output: lstm.w_output.cast(),
                b_input: lstm.b_input.cast(),
                b_forget: lstm.b_forget.cast(),
                b_cell: lstm.b_cell.cast(),
                b_output: lstm.b_output.cast(),
            },
            fusion: FusionParams {
                visual: dense(&self.fusion.visual),
                question: dense(&self.fusion.question),
                score: dense(&self.fusion.score),
            },
            head: match &self.head {
                Head::Hierarchical {
                    categorizer,
                    predictors,
                } => Head::Hierarchical {
                    categorizer: mlp(categorizer),
                    predictors: PredictorParams {
                        heads: predictors.heads.iter().map(mlp).collect(),
                    },
                },
                Head::Flat(f) => Head::Flat(mlp(f)),
            },
        }
    }
}

/// Loss components for a batch evaluated without keeping the tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues<T> {
    pub total: T,
    pub l_q: T,
    pub l_aa: T,
    pub misses: usize,
}

/// Total loss of a batch of samples.
pub fn loss_total<T: Scalar>(
    model: &Model<T>,
    emb: &EmbeddingTable<T>,
    batch: &[&Sample<T>],
    mode: RoutingMode,
) -> Result<LossValues<T>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let fwd = model.forward(&mut tape, &bound, emb, batch)?;
    let terms = model.loss(&mut tape, &bound, &fwd, batch, mode)?;
    Ok(LossValues {
        total: tape.value(terms.total)[0],
        l_q: tape.value(terms.l_q)[0],
        l_aa: tape.value(terms.l_aa)[0],
        misses: terms.misses,
    })
}
