//! Two-level answering head.
//!
//! A categorizer predicts the question category; the arg-max category picks
//! exactly one per-category answer predictor whose output space is the
//! subset of answers seen with that category. The flat baseline replaces
//! both levels with one classifier over every answer.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BoundMlp, Mlp};
use crate::ops::{self, argmax};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Global answer set split into possibly overlapping per-category subsets.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerSpace {
    categories: Vec<String>,
    answers: Vec<String>,
    subsets: Vec<Vec<usize>>,
    answer_ids: HashMap<String, usize>,
    local: Vec<HashMap<usize, usize>>,
}

impl AnswerSpace {
    /// Validates and indexes an explicit decomposition.
    pub fn from_parts(
        categories: Vec<String>,
        answers: Vec<String>,
        subsets: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if categories.is_empty() || answers.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if subsets.len() != categories.len() {
            return Err(Error::DimensionMismatch {
                what: "answer subsets per category".into(),
                expected: categories.len(),
                found: subsets.len(),
            });
        }
        let mut answer_ids = HashMap::with_capacity(answers.len());
        for (i, a) in answers.iter().enumerate() {
            if answer_ids.insert(a.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate answer {a:?}")));
            }
        }
        let mut covered = vec![false; answers.len()];
        let mut local = Vec::with_capacity(subsets.len());
        for (r, subset) in subsets.iter().enumerate() {
            if subset.is_empty() {
                return Err(Error::EmptyCategory(r));
            }
            let mut map = HashMap::with_capacity(subset.len());
            for (j, &g) in subset.iter().enumerate() {
                if g >= answers.len() {
                    return Err(Error::InvalidArgument(format!(
                        "category {r} refers to answer id {g} of {}",
                        answers.len()
                    )));
                }
                if map.insert(g, j).is_some() {
                    return Err(Error::InvalidArgument(format!(
                        "category {r} lists answer id {g} twice"
                    )));
                }
                covered[g] = true;
            }
            local.push(map);
        }
        if let Some(g) = covered.iter().position(|c| !c) {
            return Err(Error::InvalidArgument(format!(
                "answer {:?} belongs to no category",
                answers[g]
            )));
        }
        Ok(AnswerSpace {
            categories,
            answers,
            subsets,
            answer_ids,
            local,
        })
    }

    pub fn n_c(&self) -> usize {
        self.categories.len()
    }

    /// Size of the global answer set.
    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn n_a(&self, category: usize) -> usize {
        self.subsets[category].len()
    }

    pub fn subset_sizes(&self) -> Vec<usize> {
        self.subsets.iter().map(Vec::len).collect()
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn subset(&self, category: usize) -> &[usize] {
        &self.subsets[category]
    }

    pub fn answer_id(&self, answer: &str) -> Option<usize> {
        self.answer_ids.get(answer).copied()
    }

    pub fn answer(&self, id: usize) -> &str {
        &self.answers[id]
    }

    /// Position of a global answer inside a category's subset.
    pub fn local_index(&self, category: usize, answer: usize) -> Option<usize> {
        self.local.get(category)?.get(&answer).copied()
    }

    pub fn check_category(&self, category: usize) -> Result<()> {
        if category >= self.n_c() {
            return Err(Error::InvalidCategory {
                index: category,
                n_c: self.n_c(),
            });
        }
        Ok(())
    }
}

/// Collects, per category, the sorted set of answers observed with it.
pub fn build_answer_space<'a>(
    categories: &[String],
    samples: impl IntoIterator<Item = (usize, &'a str)>,
) -> Result<AnswerSpace> {
    let n_c = categories.len();
    let mut per_category = vec![BTreeSet::new(); n_c];
    let mut any = false;
    for (c, answer) in samples {
        if c >= n_c {
            return Err(Error::InvalidCategory { index: c, n_c });
        }
        per_category[c].insert(answer);
        any = true;
    }
    if !any {
        return Err(Error::EmptyDataset);
    }
    if let Some(r) = per_category.iter().position(BTreeSet::is_empty) {
        return Err(Error::EmptyCategory(r));
    }
    let global: BTreeSet<&str> = per_category.iter().flatten().copied().collect();
    let answers: Vec<String> = global.iter().map(|s| s.to_string()).collect();
    let index: HashMap<&str, usize> = global.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let subsets = per_category
        .iter()
        .map(|set| set.iter().map(|a| index[a]).collect())
        .collect();
    AnswerSpace::from_parts(categories.to_vec(), answers, subsets)
}

/// Which predictor receives the answer loss during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// The arg-max of the categorizer output.
    Predicted,
    /// The ground-truth category.
    #[default]
    TeacherForced,
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoutingMode::Predicted => "predicted",
            RoutingMode::TeacherForced => "teacher_forced",
        })
    }
}

impl FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(RoutingMode::Predicted),
            "teacher_forced" | "teacher-forced" => Ok(RoutingMode::TeacherForced),
            other => Err(Error::Config(format!("unknown routing mode {other:?}"))),
        }
    }
}

/// Level-1 question categorizer: one ReLU hidden layer, `n_c` outputs.
pub type CategorizerParams<T> = Mlp<T>;

/// Flat baseline head over the whole answer set.
pub type FlatHead<T> = Mlp<T>;

/// One single-hidden-layer answer predictor per category.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams<T> {
    pub heads: Vec<Mlp<T>>,
}

impl<T: Scalar> PredictorParams<T> {
    pub fn init<R: rand::Rng>(rng: &mut R, d_f: usize, hidden: usize, space: &AnswerSpace) -> Self {
        PredictorParams {
            heads: (0..space.n_c())
                .map(|r| Mlp::init(rng, d_f, hidden, space.n_a(r)))
                .collect(),
        }
    }

    pub fn zeros(d_f: usize, hidden: usize, space: &AnswerSpace) -> Self {
        PredictorParams {
            heads: (0..space.n_c())
                .map(|r| Mlp::zeros(d_f, hidden, space.n_a(r)))
                .collect(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Vec<BoundMlp>> {
        self.heads.iter().map(|h| h.bind(tape)).collect()
    }
}

/// Arg-max category, lowest index on ties. Not differentiable.
pub fn route<T: Scalar>(p_q: &[T]) -> Result<usize> {
    if p_q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "route" });
    }
    argmax(p_q).ok_or_else(|| Error::InvalidArgument("empty category distribution".into()))
}

fn single_row<T: Scalar>(h_a: &Tensor<T>, expected: usize) -> Result<()> {
    if h_a.numel() != expected || h_a.shape().len() > 1 {
        return Err(Error::Shape {
            op: "fused feature",
            lhs: vec![expected],
            rhs: h_a.shape().to_vec(),
        });
    }
    Ok(())
}

fn mlp_probs<T: Scalar>(h_a: &Tensor<T>, mlp: &Mlp<T>) -> Result<Tensor<T>> {
    single_row(h_a, mlp.input_dim())?;
    let mut tape = Tape::new();
    let bound = mlp.bind(&mut tape)?;
    let x = tape.constant(h_a)?;
    let logits = bound.logits(&mut tape, x)?;
    let p = tape.softmax_rows(logits)?;
    Ok(tape.to_tensor(p))
}

/// Category probabilities for one fused feature.
pub fn categorize<T: Scalar>(h_a: &Tensor<T>, params: &CategorizerParams<T>) -> Result<Tensor<T>> {
    mlp_probs(h_a, params)
}

/// Runs only predictor `r`; returns its local probabilities and the global
/// id of its most probable answer.
pub fn predict_answer<T: Scalar>(
    h_a: &Tensor<T>,
    r: usize,
    params: &PredictorParams<T>,
    space: &AnswerSpace,
) -> Result<(Tensor<T>, usize)> {
    space.check_category(r)?;
    let head = params.heads.get(r).ok_or(Error::InvalidCategory {
        index: r,
        n_c: params.heads.len(),
    })?;
    let probs = mlp_probs(h_a, head)?;
    let local = argmax(probs.data()).expect("non-empty subset");
    Ok((probs, space.subset(r)[local]))
}

/// Probabilities of the flat baseline over the full answer set.
pub fn baseline_predict<T: Scalar>(h_a: &Tensor<T>, params: &FlatHead<T>) -> Result<Tensor<T>> {
    mlp_probs(h_a, params)
}

/// Cross-entropy of the category distribution against the true category.
pub fn loss_q<T: Scalar>(p_q: &Tensor<T>, q_c: usize) -> Result<T> {
    if q_c >= p_q.numel() {
        return Err(Error::InvalidCategory {
            index: q_c,
            n_c: p_q.numel(),
        });
    }
    let mut hot = vec![T::zero(); p_q.numel()];
    hot[q_c] = T::one();
    ops::cross_entropy(p_q, &Tensor::new(p_q.shape().to_vec(), hot)?)
}

/// Picks the predictor for each sample.
pub fn select_routes<T: Scalar>(
    p_q_rows: &[T],
    n_c: usize,
    categories: &[usize],
    mode: RoutingMode,
) -> Result<Vec<usize>> {
    match mode {
        RoutingMode::TeacherForced => Ok(categories.to_vec()),
        RoutingMode::Predicted => p_q_rows.chunks(n_c).map(route).collect(),
    }
}

/// Second-level loss recorded on a tape.
#[derive(Debug, Clone)]
pub struct RoutedLoss {
    /// Sum of per-sample answer losses divided by the batch size.
    pub loss: Var,
    /// Predictor chosen for each sample.
    pub routes: Vec<usize>,
    /// Whether each sample's loss was counted (false on a routing miss).
    pub counted: Vec<bool>,
    pub misses: usize,
}

/// Answer loss for a batch of fused features `[b × d_f]`.
///
/// Each sample's loss comes only from the predictor in `routes`. A sample
/// whose answer is not in that predictor's subset is skipped and counted as
/// a miss; with teacher forcing such a sample is an error.
pub fn routed_answer_loss<T: Scalar>(
    tape: &mut Tape<T>,
    fused: Var,
    routes: &[usize],
    answers: &[Option<usize>],
    mode: RoutingMode,
    predictors: &[BoundMlp],
    space: &AnswerSpace,
) -> Result<RoutedLoss> {
    let batch = routes.len();
    if answers.len() != batch || batch == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} routes for {} answers",
            batch,
            answers.len()
        )));
    }
    let mut groups: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); space.n_c()];
    let mut counted = vec![false; batch];
    let mut misses = 0;
    for (i, (&r, answer)) in routes.iter().zip(answers).enumerate() {
        space.check_category(r)?;
        match answer.and_then(|a| space.local_index(r, a)) {
            Some(local) => {
                groups[r].0.push(i);
                groups[r].1.push(local);
                counted[i] = true;
            }
            None if mode == RoutingMode::Predicted => misses += 1,
            None => {
                return Err(Error::InvalidArgument(format!(
                    "sample {i}: answer is not in the subset of its category {r}"
                )))
            }
        }
    }
    let mut total: Option<Var> = None;
    for (r, (rows, locals)) in groups.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let x = tape.select_rows(fused, rows)?;
        let logits = predictors[r].logits(tape, x)?;
        let ce = tape.softmax_cross_entropy(logits, locals)?;
        let s = tape.sum(ce)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let inv_batch = T::one() / T::from_usize(batch).expect("count");
    let loss = match total {
        Some(t) => tape.scale(t, inv_batch)?,
        None => tape.constant_raw(vec![], vec![T::zero()])?,
    };
    Ok(RoutedLoss {
        loss,
        routes: routes.to_vec(),
        counted,
        misses,
    })
}

/// Answer loss of one sample and where it was routed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnswerLoss<T> {
    pub loss: T,
    pub route: usize,
    pub missed: bool,
}

/// Second-level loss for a single fused feature and category distribution.
pub fn loss_aa<T: Scalar>(
    h_a: &Tensor<T>,
    p_q: &Tensor<T>,
    answer: usize,
    q_c: usize,
    mode: RoutingMode,
    params: &PredictorParams<T>,
    space: &AnswerSpace,
) -> Result<AnswerLoss<T>> {
    space.check_category(q_c)?;
    if p_q.numel() != space.n_c() {
        return Err(Error::Shape {
            op: "loss_aa",
            lhs: vec![space.n_c()],
            rhs: p_q.shape().to_vec(),
        });
    }
    let routes = select_routes(p_q.data(), space.n_c(), &[q_c], mode)?;
    let mut tape = Tape::new();
    let predictors = params.bind(&mut tape)?;
    let fused = tape.constant(h_a)?;
    let fused = tape.reshape(fused, [1, h_a.numel()])?;
    let out = routed_answer_loss(
        &mut tape,
        fused,
        &routes,
        &[Some(answer)],
        mode,
        &predictors,
        space,
    )?;
    Ok(AnswerLoss {
        loss: tape.value(out.loss)[0],
        route: routes[0],
        missed: out.misses > 0,
    })
}
