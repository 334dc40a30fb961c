//! Comparison summarizers: attention over a truncated recent window, and
//! two-stage retrieval (hard category filter or soft inner-product top-r)
//! followed by attention over the retrieved behaviors.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{attend, Init, ModelConfig, SequenceSummarizer, Summary, TargetContext, UserContext, UserState};
use crate::numerics::{dot, softmax_rows, Matrix, ParamId, Real, Tape, Var};

/// Behaviors picked by a retrieval stage: positions into the original
/// sequence and their retrieval scores.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievedSubsequence {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RetrievedSubsequence {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Query `2d x d`, key and value `d x d` projections of a target-attention
/// block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T: Real = f32> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
}

impl<T: Real> AttentionWeights<T> {
    pub fn d(&self) -> usize {
        self.wk.cols()
    }
}

/// Single-head target attention of `query` over the rows of `seq`.
fn target_attention<T: Real>(seq: &Matrix<T>, query: &[T], w: &AttentionWeights<T>) -> Result<Vec<T>> {
    if seq.rows() == 0 {
        return Err(Error::Empty("behavior sequence"));
    }
    let q = Matrix::row_vector(query.to_vec()).matmul(&w.wq)?;
    let keys = seq.matmul(&w.wk)?;
    let values = seq.matmul(&w.wv)?;
    let scale = T::one() / T::lit(w.d() as f64).sqrt();
    let s = q.matmul(&keys.transpose())?.map(|x| x * scale);
    Ok(softmax_rows(&s).matmul(&values)?.into_data())
}

/// Attention over the last `n` behaviors only.
pub fn truncated_target_attention<T: Real>(
    seq: &Matrix<T>,
    query: &[T],
    n: usize,
    w: &AttentionWeights<T>,
) -> Result<Vec<T>> {
    if n == 0 {
        return Err(Error::InvalidArgument("truncation length must be positive".into()));
    }
    let start = seq.rows().saturating_sub(n);
    let tail: Vec<T> = seq.data()[start * seq.cols()..].to_vec();
    target_attention(&Matrix::from_vec(seq.rows() - start, seq.cols(), tail)?, query, w)
}

/// The `r` most recent behaviors whose category equals `target`, in time
/// order.
pub fn gsu_hard(categories: &[u32], target: u32, r: usize) -> RetrievedSubsequence {
    let mut indices: Vec<usize> = categories.iter().enumerate().rev().filter(|&(_, &c)| c == target).map(|(i, _)| i).take(r).collect();
    indices.reverse();
    let scores = vec![1.0; indices.len()];
    RetrievedSubsequence { indices, scores }
}

/// Top `r` behaviors by inner product with `target`, best first; equal
/// scores go to the more recent behavior.
pub fn gsu_soft<T: Real>(seq: &Matrix<T>, target: &[T], r: usize) -> RetrievedSubsequence {
    let mut scored: Vec<(usize, f64)> = (0..seq.rows()).map(|i| (i, dot(seq.row(i), target).as_f64())).collect();
    let by_rank = |a: &(usize, f64), b: &(usize, f64)| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(b.0.cmp(&a.0));
    if r < scored.len() {
        scored.select_nth_unstable_by(r, by_rank);
        scored.truncate(r);
    }
    scored.sort_by(by_rank);
    RetrievedSubsequence { indices: scored.iter().map(|s| s.0).collect(), scores: scored.iter().map(|s| s.1).collect() }
}

/// Target attention over the retrieved behaviors. An empty retrieval
/// yields a zero vector and `false`.
pub fn esu_attention<T: Real>(
    seq: &Matrix<T>,
    retrieved: &RetrievedSubsequence,
    query: &[T],
    w: &AttentionWeights<T>,
) -> Result<(Vec<T>, bool)> {
    if retrieved.is_empty() {
        return Ok((vec![T::zero(); w.d()], false));
    }
    let mut sub = Matrix::zeros(retrieved.len(), seq.cols());
    for (i, &j) in retrieved.indices.iter().enumerate() {
        if j >= seq.rows() {
            return Err(Error::Shape(format!("retrieved index {j} outside a sequence of {}", seq.rows())));
        }
        sub.row_mut(i).copy_from_slice(seq.row(j));
    }
    Ok((target_attention(&sub, query, w)?, true))
}

struct Projections {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    d: usize,
}

impl Projections {
    fn new<T: Real>(cfg: &ModelConfig, init: &mut Init<T>, prefix: &str) -> Self {
        Self {
            wq: init.xavier(format!("{prefix}.wq"), 2 * cfg.d, cfg.d),
            wk: init.xavier(format!("{prefix}.wk"), cfg.d, cfg.d),
            wv: init.xavier(format!("{prefix}.wv"), cfg.d, cfg.d),
            d: cfg.d,
        }
    }

    fn attend<T: Real>(&self, tape: &mut Tape<'_, T>, seq: Var, query: Var) -> Var {
        let wq = tape.param(self.wq);
        let q = tape.matmul(query, wq);
        let wk = tape.param(self.wk);
        let k = tape.matmul(seq, wk);
        let wv = tape.param(self.wv);
        let v = tape.matmul(seq, wv);
        attend(tape, q, k, v, self.d).0
    }
}

fn summary<T: Real>(out: Var) -> Result<Summary<T>> {
    Ok(Summary { out, cached: None, trace: None })
}

/// Target attention over the most recent `trunc_len` behaviors.
pub struct TruncatedAttention {
    n: usize,
    proj: Projections,
}

impl TruncatedAttention {
    pub fn new<T: Real>(cfg: &ModelConfig, init: &mut Init<T>) -> Result<Self> {
        Ok(Self { n: cfg.trunc_len, proj: Projections::new(cfg, init, "din") })
    }
}

impl<T: Real> SequenceSummarizer<T> for TruncatedAttention {
    fn name(&self) -> &'static str {
        "din"
    }

    fn output_width(&self) -> usize {
        self.proj.d
    }

    fn history_window(&self) -> Option<usize> {
        Some(self.n)
    }

    fn encode_user(&self, _tape: &mut Tape<'_, T>, _user: &UserContext<'_>) -> Result<UserState> {
        Ok(UserState::default())
    }

    fn summarize(
        &self,
        tape: &mut Tape<'_, T>,
        user: &UserContext<'_>,
        _state: &UserState,
        target: &TargetContext,
    ) -> Result<Summary<T>> {
        let len = tape.value(user.behaviors).rows();
        let seq = if len > self.n { tape.rows(user.behaviors, len - self.n, self.n) } else { user.behaviors };
        summary(self.proj.attend(tape, seq, target.query))
    }
}

fn esu_on_tape<T: Real>(
    proj: &Projections,
    tape: &mut Tape<'_, T>,
    user: &UserContext<'_>,
    retrieved: &RetrievedSubsequence,
    target: &TargetContext,
) -> Result<Summary<T>> {
    if retrieved.is_empty() {
        return summary(tape.input(Matrix::zeros(1, proj.d)));
    }
    let seq = tape.select_rows(user.behaviors, &retrieved.indices);
    summary(proj.attend(tape, seq, target.query))
}

/// Category filter retrieval followed by target attention.
pub struct SimHard {
    r: usize,
    proj: Projections,
}

impl SimHard {
    pub fn new<T: Real>(cfg: &ModelConfig, init: &mut Init<T>) -> Result<Self> {
        Ok(Self { r: cfg.gsu_r, proj: Projections::new(cfg, init, "sim_hard") })
    }
}

impl<T: Real> SequenceSummarizer<T> for SimHard {
    fn name(&self) -> &'static str {
        "sim-hard"
    }

    fn output_width(&self) -> usize {
        self.proj.d
    }

    fn encode_user(&self, _tape: &mut Tape<'_, T>, _user: &UserContext<'_>) -> Result<UserState> {
        Ok(UserState::default())
    }

    fn summarize(
        &self,
        tape: &mut Tape<'_, T>,
        user: &UserContext<'_>,
        _state: &UserState,
        target: &TargetContext,
    ) -> Result<Summary<T>> {
        let cats: Vec<u32> = user.items.iter().map(|&i| user.features.category[i]).collect();
        let retrieved = gsu_hard(&cats, target.category, self.r);
        esu_on_tape(&self.proj, tape, user, &retrieved, target)
    }
}

/// Inner-product top-r retrieval followed by target attention.
pub struct SimSoft {
    r: usize,
    proj: Projections,
}

impl SimSoft {
    pub fn new<T: Real>(cfg: &ModelConfig, init: &mut Init<T>) -> Result<Self> {
        Ok(Self { r: cfg.gsu_r, proj: Projections::new(cfg, init, "sim_soft") })
    }
}

impl<T: Real> SequenceSummarizer<T> for SimSoft {
    fn name(&self) -> &'static str {
        "sim-soft"
    }

    fn output_width(&self) -> usize {
        self.proj.d
    }

    fn encode_user(&self, _tape: &mut Tape<'_, T>, _user: &UserContext<'_>) -> Result<UserState> {
        Ok(UserState::default())
    }

    fn summarize(
        &self,
        tape: &mut Tape<'_, T>,
        user: &UserContext<'_>,
        _state: &UserState,
        target: &TargetContext,
    ) -> Result<Summary<T>> {
        // Retrieval is a hard selection; gradients flow only through the
        // attention stage.
        let retrieved = gsu_soft(tape.value(user.behaviors), tape.value(target.behavior_space).data(), self.r);
        esu_on_tape(&self.proj, tape, user, &retrieved, target)
    }
}

#[cfg(test)]
mod tests;
