//! Answer heads for open-ended, counting and multiple-choice questions, and their losses.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

/// Largest count label.
pub const MAX_COUNT: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub enum AnswerLogits {
    OpenEnded(Vec<f64>),
    Count(f64),
    Multichoice(Vec<f64>),
}

impl AnswerLogits {
    /// Predicted label index (answer id, count value, or candidate index).
    pub fn prediction(&self) -> usize {
        match self {
            AnswerLogits::OpenEnded(p) | AnswerLogits::Multichoice(p) => argmax(p),
            AnswerLogits::Count(s) => count_prediction(*s),
        }
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `clamp(round(s), 0, 10)`; NaN maps to 0.
pub fn count_prediction(score: f64) -> usize {
    if score.is_nan() {
        return 0;
    }
    score.round().clamp(0.0, MAX_COUNT as f64) as usize
}

/// Two-layer head over `[m ; W^q q + b^q]`, linear between the layers.
#[derive(Clone, Copy, Debug)]
pub struct OpenEndedHead {
    pub question: Linear,
    pub first: Linear,
    pub second: Linear,
}

impl OpenEndedHead {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize, answers: usize) -> Result<Self> {
        if answers < 2 {
            return Err(Error::contract(format!("answer vocabulary of size {answers}")));
        }
        Ok(OpenEndedHead {
            question: Linear::new(store, &format!("{name}.q"), dim, dim, true)?,
            first: Linear::new(store, &format!("{name}.o1"), 2 * dim, dim, true)?,
            second: Linear::new(store, &format!("{name}.o2"), dim, answers, true)?,
        })
    }

    /// Unnormalized scores `[V]`.
    pub fn logits<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, memory: Var, question: Var) -> Result<Var> {
        let q = self.question.forward(g, store, question)?;
        let joined = g.concat_last(&[memory, q])?;
        let hidden = self.first.forward(g, store, joined)?;
        self.second.forward(g, store, hidden)
    }

    /// Probabilities `[V]`.
    pub fn decode<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, memory: Var, question: Var) -> Result<Var> {
        let logits = self.logits(g, store, memory, question)?;
        Ok(g.softmax(logits))
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.question, self.first, self.second]
            .iter()
            .flat_map(Linear::params)
            .collect()
    }
}

/// Same layout as the open-ended head with a single real output.
#[derive(Clone, Copy, Debug)]
pub struct CountHead {
    pub question: Linear,
    pub first: Linear,
    pub second: Linear,
}

impl CountHead {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        Ok(CountHead {
            question: Linear::new(store, &format!("{name}.q"), dim, dim, true)?,
            first: Linear::new(store, &format!("{name}.o1"), 2 * dim, dim, true)?,
            second: Linear::new(store, &format!("{name}.o2"), dim, 1, true)?,
        })
    }

    /// Raw regression score, shape `[]`.
    pub fn score<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, memory: Var, question: Var) -> Result<Var> {
        let q = self.question.forward(g, store, question)?;
        let joined = g.concat_last(&[memory, q])?;
        let hidden = self.first.forward(g, store, joined)?;
        let s = self.second.forward(g, store, hidden)?;
        g.reshape(s, &[])
    }

    pub fn decode<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, memory: Var, question: Var) -> Result<usize> {
        let s = self.score(g, store, memory, question)?;
        Ok(count_prediction(g.value(s).item().f64()))
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.question, self.first, self.second]
            .iter()
            .flat_map(Linear::params)
            .collect()
    }
}

/// Scores one candidate from question memory, candidate memory and both encodings.
#[derive(Clone, Copy, Debug)]
pub struct MultichoiceHead {
    pub question: Linear,
    pub answer: Linear,
    pub hidden: Linear,
    pub score: Linear,
}

/// Per-candidate inputs: MAC memory for the candidate and its sentence vector.
#[derive(Clone, Copy, Debug)]
pub struct Candidate {
    pub memory: Var,
    pub encoding: Var,
}

impl MultichoiceHead {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        Ok(MultichoiceHead {
            question: Linear::new(store, &format!("{name}.q"), dim, dim, true)?,
            answer: Linear::new(store, &format!("{name}.a"), dim, dim, true)?,
            hidden: Linear::new(store, &format!("{name}.y"), 4 * dim, dim, true)?,
            score: Linear::new(store, &format!("{name}.s"), dim, 1, true)?,
        })
    }

    /// Score `[]` for one candidate.
    pub fn score<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        question_memory: Var,
        question: Var,
        candidate: Candidate,
    ) -> Result<Var> {
        let q = self.question.forward(g, store, question)?;
        let a = self.answer.forward(g, store, candidate.encoding)?;
        let y = g.concat_last(&[question_memory, candidate.memory, q, a])?;
        let pre = self.hidden.forward(g, store, y)?;
        let act = g.elu(pre);
        let s = self.score.forward(g, store, act)?;
        g.reshape(s, &[])
    }

    /// One score per candidate.
    pub fn scores<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        question_memory: Var,
        question: Var,
        candidates: &[Candidate],
    ) -> Result<Vec<Var>> {
        if candidates.len() < 2 {
            return Err(Error::contract(format!(
                "multiple choice needs at least 2 candidates, got {}",
                candidates.len()
            )));
        }
        candidates
            .iter()
            .map(|&c| self.score(g, store, question_memory, question, c))
            .collect()
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.question, self.answer, self.hidden, self.score]
            .iter()
            .flat_map(Linear::params)
            .collect()
    }
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy<F: Real>(g: &mut Graph<F>, logits: Var, target: usize) -> Result<Var> {
    let n = g.value(logits).len();
    if target >= n {
        return Err(Error::Vocabulary { index: target, size: n });
    }
    let lp = g.log_softmax(logits);
    let picked = g.pick(lp, target)?;
    Ok(g.scale(picked, -1.0))
}

/// `(s - target)^2`.
pub fn squared_error<F: Real>(g: &mut Graph<F>, score: Var, target: f64) -> Result<Var> {
    let diff = g.add_scalar(score, -target)?;
    let sq = g.square(diff)?;
    Ok(g.sum_all(sq))
}

/// `Σ_n max(0, 1 + s_n - s_p)`.
pub fn hinge_loss<F: Real>(g: &mut Graph<F>, positive: Var, negatives: &[Var]) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::contract("hinge loss needs at least one negative"));
    }
    let mut terms = Vec::with_capacity(negatives.len());
    for &n in negatives {
        let shifted = g.add_scalar(n, 1.0)?;
        let margin = g.sub(shifted, positive)?;
        let m = g.reshape(margin, &[1])?;
        terms.push(g.relu(m));
    }
    let all = g.concat_last(&terms)?;
    Ok(g.sum_all(all))
}
