//! Question-guided attention over image regions and multiplicative fusion.
//!
//! Regions and the question are projected into a shared `d_f` space. Each
//! region is scored from its element-wise product with the projected
//! question, the scores are normalized with a softmax over the regions, and
//! the fused feature is the projected question times the score-weighted sum
//! of projected regions.

use rand::Rng;

use crate::encoders::RegionFeatures;
use crate::error::{Error, Result};
use crate::nn::{BoundDense, Dense};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T> {
    /// `d_v → d_f`
    pub visual: Dense<T>,
    /// `d_q → d_f`
    pub question: Dense<T>,
    /// `d_f → 1`
    pub score: Dense<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundFusion {
    pub visual: BoundDense,
    pub question: BoundDense,
    pub score: BoundDense,
}

/// Normalized region scores and the fused feature.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult<T> {
    pub scores: Tensor<T>,
    pub fused: Tensor<T>,
}

impl<T: Scalar> FusionParams<T> {
    pub fn init<R: Rng>(rng: &mut R, d_v: usize, d_q: usize, d_f: usize) -> Self {
        FusionParams {
            visual: Dense::init(rng, d_v, d_f),
            question: Dense::init(rng, d_q, d_f),
            score: Dense::init(rng, d_f, 1),
        }
    }

    pub fn d_f(&self) -> usize {
        self.visual.fan_out()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BoundFusion> {
        let d_f = self.d_f();
        if self.question.fan_out() != d_f || self.score.fan_in() != d_f || self.score.fan_out() != 1
        {
            return Err(Error::Shape {
                op: "fusion params",
                lhs: self.visual.weight.shape().to_vec(),
                rhs: self.score.weight.shape().to_vec(),
            });
        }
        Ok(BoundFusion {
            visual: self.visual.bind(tape)?,
            question: self.question.bind(tape)?,
            score: self.score.bind(tape)?,
        })
    }

    pub(crate) fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.visual.visit("fusion.visual", out);
        self.question.visit("fusion.question", out);
        self.score.visit("fusion.score", out);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.visual.visit_mut(out);
        self.question.visit_mut(out);
        self.score.visit_mut(out);
    }
}

impl BoundFusion {
    pub(crate) fn vars(&self, out: &mut Vec<Var>) {
        self.visual.vars(out);
        self.question.vars(out);
        self.score.vars(out);
    }

    /// Projects `regions[b·k × d_v]` and `question[b × d_q]` into `d_f`.
    pub fn project<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        regions: Var,
        question: Var,
    ) -> Result<(Var, Var)> {
        let v = self.visual.forward(tape, regions)?;
        let q = self.question.forward(tape, question)?;
        Ok((v, q))
    }

    /// Returns `(scores[b × k], fused[b × d_f])`.
    pub fn attend_and_fuse<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        regions: Var,
        question: Var,
        k: usize,
    ) -> Result<(Var, Var)> {
        if k == 0 {
            return Err(Error::InvalidArgument(
                "attention needs at least one region".into(),
            ));
        }
        let (batch, d_f) = match *tape.shape(question) {
            [d] => (1, d),
            [b, d] => (b, d),
            ref other => {
                return Err(Error::Shape {
                    op: "attend_and_fuse",
                    lhs: tape.shape(regions).to_vec(),
                    rhs: other.to_vec(),
                })
            }
        };
        let q = tape.reshape(question, [batch, d_f])?;
        let q_per_region = tape.repeat_rows(q, k)?;
        let joint = tape.mul(regions, q_per_region)?;
        let raw = self.score.forward(tape, joint)?;
        let raw = tape.reshape(raw, [batch, k])?;
        let scores = tape.softmax_rows(raw)?;
        let pooled = tape.weighted_row_sum(scores, regions)?;
        let fused = tape.mul(q, pooled)?;
        Ok((scores, fused))
    }
}

/// Projects one image's regions and one question feature.
pub fn project<T: Scalar>(
    features: &RegionFeatures<T>,
    f_q: &Tensor<T>,
    params: &FusionParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let regions = tape.constant(features.tensor())?;
    let question = tape.constant(f_q)?;
    let (v, q) = bound.project(&mut tape, regions, question)?;
    Ok((tape.to_tensor(v), tape.to_tensor(q)))
}

/// Scores `v_tilde[k × d_f]` against `f_q_tilde[d_f]` and fuses them.
pub fn attend_and_fuse<T: Scalar>(
    v_tilde: &Tensor<T>,
    f_q_tilde: &Tensor<T>,
    params: &FusionParams<T>,
) -> Result<AttentionResult<T>> {
    let k = v_tilde.rows();
    if v_tilde.shape().len() != 2 || v_tilde.cols() != f_q_tilde.cols() {
        return Err(Error::Shape {
            op: "attend_and_fuse",
            lhs: v_tilde.shape().to_vec(),
            rhs: f_q_tilde.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let regions = tape.constant(v_tilde)?;
    let question = tape.constant(f_q_tilde)?;
    let (s, h) = bound.attend_and_fuse(&mut tape, regions, question, k)?;
    Ok(AttentionResult {
        scores: tape.to_tensor(s).reshape([k])?,
        fused: tape.to_tensor(h).reshape([v_tilde.cols()])?,
    })
}
