//! Interchangeable sequence-summarization blocks, registered by name.
//!
//! Every model shares the embedding bottom and the prediction head; only
//! the block that turns a behavior sequence plus a target into a summary
//! vector differs. Strategies are looked up by name at construction time.

use super::init::Init;
use super::{ItemFeatures, ModelConfig};
use crate::baselines::{SimHard, SimSoft, TruncatedAttention};
use crate::error::{Error, Result};
use crate::model::uxsid::Uxsid;
use crate::numerics::{Matrix, Real, Tape, Var};

/// Per-user inputs, built once and shared by all targets of that user.
pub struct UserContext<'a> {
    /// Behavior item ids, oldest first.
    pub items: &'a [usize],
    /// `L x d` behavior embeddings.
    pub behaviors: Var,
    pub features: &'a ItemFeatures,
}

/// Opaque per-user state produced by [`SequenceSummarizer::encode_user`].
#[derive(Clone, Debug, Default)]
pub struct UserState {
    pub vars: Vec<Var>,
}

pub struct TargetContext {
    pub item: usize,
    pub sid: u32,
    pub category: u32,
    /// `1 x 2d`: target item embedding next to its SID embedding.
    pub query: Var,
    /// `1 x d` SID embedding.
    pub sid_emb: Var,
    /// `1 x d` target in behavior-embedding space.
    pub behavior_space: Var,
}

/// Attention diagnostics of the target-SID probe.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T: Real = f32> {
    /// Probe attention over the `L` behaviors.
    pub global_scores: Vec<T>,
    /// Probe attention over the `K` anchors.
    pub local_scores: Vec<T>,
    pub e_global: Vec<T>,
    pub e_local: Vec<T>,
    /// Compressed anchors, `K x d`.
    pub anchors: Matrix<T>,
}

pub struct Summary<T: Real> {
    /// `1 x output_width()`.
    pub out: Var,
    /// Cacheable `2 x d` representation, for strategies that have one.
    pub cached: Option<Var>,
    pub trace: Option<ForwardTrace<T>>,
}

pub trait SequenceSummarizer<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn output_width(&self) -> usize;

    /// Most recent behaviors the block reads; `None` reads everything.
    fn history_window(&self) -> Option<usize> {
        None
    }

    fn encode_user(&self, tape: &mut Tape<'_, T>, user: &UserContext<'_>) -> Result<UserState>;

    fn summarize(
        &self,
        tape: &mut Tape<'_, T>,
        user: &UserContext<'_>,
        state: &UserState,
        target: &TargetContext,
    ) -> Result<Summary<T>>;

    /// Regularizer attached to the per-user state, if any.
    fn aux_loss(&self, _tape: &mut Tape<'_, T>, _state: &UserState) -> Result<Option<Var>> {
        Ok(None)
    }

    /// The `2 x d` per-(user, SID) representation and its trace. Only
    /// strategies with a cacheable stage implement this.
    fn cache_embed(
        &self,
        _tape: &mut Tape<'_, T>,
        _state: &UserState,
        _sid_emb: Var,
    ) -> Result<Option<(Var, ForwardTrace<T>)>> {
        Ok(None)
    }

    /// Target-query attention over a cached `2 x d` representation.
    fn online(&self, _tape: &mut Tape<'_, T>, _cached: Var, _query: Var) -> Result<Option<Var>> {
        Ok(None)
    }
}

pub type Factory<T> = fn(&ModelConfig, &mut Init<T>) -> Result<Box<dyn SequenceSummarizer<T>>>;

pub struct Registry<T: Real> {
    entries: Vec<(&'static str, Factory<T>)>,
}

impl<T: Real> Registry<T> {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    /// `uxsid`, `din`, `sim-hard` and `sim-soft`.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("uxsid", |cfg, init| Ok(Box::new(Uxsid::new(cfg, init)?)));
        r.register("din", |cfg, init| Ok(Box::new(TruncatedAttention::new(cfg, init)?)));
        r.register("sim-hard", |cfg, init| Ok(Box::new(SimHard::new(cfg, init)?)));
        r.register("sim-soft", |cfg, init| Ok(Box::new(SimSoft::new(cfg, init)?)));
        r
    }

    pub fn register(&mut self, name: &'static str, factory: Factory<T>) {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, factory));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn create(&self, name: &str, cfg: &ModelConfig, init: &mut Init<T>) -> Result<Box<dyn SequenceSummarizer<T>>> {
        let (_, f) = self.entries.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown strategy {name:?}; known: {}", self.names().join(", ")))
        })?;
        f(cfg, init)
    }
}

/// Single-head attention `softmax((q Wq)(K Wk)ᵀ / √d)(V Wv)` for
/// pre-projected keys and values. Returns the output and the score row(s).
pub(crate) fn attend<T: Real>(tape: &mut Tape<'_, T>, q_proj: Var, keys: Var, values: Var, d: usize) -> (Var, Var) {
    let s = tape.matmul_bt(q_proj, keys);
    let s = tape.scale(s, T::one() / T::lit(d as f64).sqrt());
    let a = tape.softmax_rows(s);
    (tape.matmul(a, values), a)
}
