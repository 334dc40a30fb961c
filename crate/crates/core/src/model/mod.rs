//! CTR model: shared embedding bottom, a pluggable sequence summarizer and
//! a two-logit MLP head.

mod checkpoint;
mod init;
mod registry;
mod uxsid;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use init::Init;
pub use registry::{
    Factory, ForwardTrace, Registry, SequenceSummarizer, Summary, TargetContext, UserContext, UserState,
};
pub use uxsid::Uxsid;

pub(crate) use registry::attend;

use crate::error::{Error, Result};
use crate::numerics::{pair_probability, Grads, Matrix, OrthoMode, ParamId, ParamStore, Real, Tape, Var};
use crate::sidgen::{Codebook, ContentVector, ItemSid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Registered summarizer name.
    pub strategy: String,
    pub d: usize,
    #[serde(rename = "K")]
    pub k_anchors: usize,
    pub d_ff: usize,
    pub d_g: usize,
    pub n_items: usize,
    pub n_users: usize,
    /// First-layer codewords.
    pub n_sids: usize,
    /// Most recent behaviors averaged into the short-term feature.
    pub short_window: usize,
    pub ortho_mode: OrthoMode,
    /// Add each behavior's SID embedding to its item embedding.
    pub behavior_sid_feature: bool,
    pub trunc_len: usize,
    pub gsu_r: usize,
    pub head_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            strategy: "uxsid".into(),
            d: 16,
            k_anchors: 16,
            d_ff: 32,
            d_g: 16,
            n_items: 0,
            n_users: 0,
            n_sids: 0,
            short_window: 10,
            ortho_mode: OrthoMode::Frobenius,
            behavior_sid_feature: true,
            trunc_len: 100,
            gsu_r: 100,
            head_hidden: vec![200, 80],
        }
    }
}

impl ModelConfig {
    /// Copy with vocabulary sizes taken from the data.
    pub fn sized_for(&self, features: &ItemFeatures, n_users: usize, n_sids: usize) -> Self {
        Self { n_items: features.len(), n_users, n_sids: n_sids.max(features.n_sids()), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.short_window == 0 || self.trunc_len == 0 || self.gsu_r == 0 {
            return Err(Error::InvalidArgument("d, short_window, trunc_len and gsu_r must be positive".into()));
        }
        if self.n_items == 0 || self.n_users == 0 || self.n_sids == 0 {
            return Err(Error::InvalidArgument("vocabulary sizes must be positive".into()));
        }
        if self.head_hidden.contains(&0) {
            return Err(Error::InvalidArgument("head layers must be non-empty".into()));
        }
        Ok(())
    }
}

/// First-layer SID and category per item id. Ids without content carry
/// `u32::MAX` and are rejected at lookup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemFeatures {
    pub sid: Vec<u32>,
    pub category: Vec<u32>,
}

impl ItemFeatures {
    pub fn from_parts(items: &[ContentVector], sids: &[ItemSid]) -> Result<Self> {
        let n = items.iter().map(|i| i.item_id as usize + 1).max().unwrap_or(0);
        let mut out = Self { sid: vec![u32::MAX; n], category: vec![u32::MAX; n] };
        for it in items {
            out.category[it.item_id as usize] = it.category;
        }
        for s in sids {
            let i = s.item_id as usize;
            if i >= n || out.category[i] == u32::MAX {
                return Err(Error::UnknownId(format!("item {} has a SID but no content vector", s.item_id)));
            }
            out.sid[i] = *s.codes.first().ok_or(Error::Empty("SID tuple"))?;
        }
        if let Some(i) = out.category.iter().zip(&out.sid).position(|(&c, &s)| c != u32::MAX && s == u32::MAX) {
            return Err(Error::UnknownId(format!("item {i} has no SID")));
        }
        Ok(out)
    }

    /// Encodes every item with `codebook` and keeps the first-layer code.
    pub fn from_codebook(items: &[ContentVector], codebook: &Codebook) -> Result<Self> {
        Self::from_parts(items, &crate::sidgen::encode_items(codebook, items)?)
    }

    pub fn len(&self) -> usize {
        self.sid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sid.is_empty()
    }

    /// Largest first-layer code plus one.
    pub fn n_sids(&self) -> usize {
        self.sid.iter().filter(|&&s| s != u32::MAX).map(|&s| s as usize + 1).max().unwrap_or(0)
    }

    pub fn sid(&self, item: u64) -> Result<u32> {
        match self.sid.get(item as usize) {
            Some(&s) if s != u32::MAX => Ok(s),
            _ => Err(Error::UnknownId(format!("item {item}"))),
        }
    }

    pub fn category(&self, item: u64) -> Result<u32> {
        self.sid(item)?;
        Ok(self.category[item as usize])
    }
}

/// One labelled impression with its behavior history (oldest first).
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub user: u64,
    pub history: &'a [u64],
    pub target: u64,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    /// Mean cross-entropy over the batch.
    pub bce: f64,
    /// Mean orthogonality penalty over the batch (before `λ`).
    pub ortho: f64,
    pub n: usize,
}

#[derive(Clone, Debug)]
pub struct Scored<T: Real = f32> {
    pub p: T,
    pub trace: Option<ForwardTrace<T>>,
}

#[derive(Clone, Copy)]
struct Embeddings {
    item: ParamId,
    sid: ParamId,
    user: ParamId,
}

struct UserPass<'a> {
    ctx: UserContext<'a>,
    state: UserState,
    user: Var,
    short: Var,
}

pub struct Model<T: Real = f32> {
    cfg: ModelConfig,
    features: ItemFeatures,
    params: ParamStore<T>,
    emb: Embeddings,
    head: Vec<(ParamId, ParamId)>,
    summarizer: Box<dyn SequenceSummarizer<T>>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig, features: ItemFeatures, seed: u64) -> Result<Self> {
        Self::with_registry(cfg, features, seed, &Registry::builtin())
    }

    pub fn with_registry(cfg: ModelConfig, features: ItemFeatures, seed: u64, registry: &Registry<T>) -> Result<Self> {
        cfg.validate()?;
        if features.len() != cfg.n_items {
            return Err(Error::Shape(format!("{} item features for {} items", features.len(), cfg.n_items)));
        }
        if features.n_sids() > cfg.n_sids {
            return Err(Error::Shape(format!("SID {} outside {} codewords", features.n_sids() - 1, cfg.n_sids)));
        }
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed);
        let std = 1.0 / (cfg.d as f64).sqrt();
        let emb = Embeddings {
            item: init.normal("emb.item", cfg.n_items, cfg.d, std),
            sid: init.normal("emb.sid", cfg.n_sids, cfg.d, std),
            user: init.normal("emb.user", cfg.n_users, cfg.d, std),
        };
        let summarizer = registry.create(&cfg.strategy, &cfg, &mut init)?;
        let mut widths = vec![4 * cfg.d + summarizer.output_width()];
        widths.extend(&cfg.head_hidden);
        widths.push(2);
        let head = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                (init.xavier(format!("head.{i}.w"), w[0], w[1]), init.constant(format!("head.{i}.b"), 1, w[1], 0.0))
            })
            .collect();
        Ok(Self { cfg, features, params, emb, head, summarizer })
    }

    /// Same architecture in another precision, with converted weights.
    pub fn cast<U: Real>(&self) -> Result<Model<U>> {
        let mut out = Model::<U>::new(self.cfg.clone(), self.features.clone(), 0)?;
        out.params.copy_values_from(&self.params)?;
        Ok(out)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn features(&self) -> &ItemFeatures {
        &self.features
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn strategy(&self) -> &'static str {
        self.summarizer.name()
    }

    pub fn head_input_width(&self) -> usize {
        self.params.value(self.head[0].0).rows()
    }

    fn user_index(&self, user: u64) -> Result<usize> {
        if (user as usize) < self.cfg.n_users {
            Ok(user as usize)
        } else {
            Err(Error::UnknownId(format!("user {user}")))
        }
    }

    fn behaviors(&self, tape: &mut Tape<'_, T>, items: &[usize]) -> Result<Var> {
        let e = tape.gather(self.emb.item, items);
        if !self.cfg.behavior_sid_feature {
            return Ok(e);
        }
        let sids = items.iter().map(|&i| self.features.sid(i as u64).map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
        let s = tape.gather(self.emb.sid, &sids);
        Ok(tape.add(e, s))
    }

    fn encode_user<'a>(&'a self, tape: &mut Tape<'_, T>, user: u64, items: &'a [usize]) -> Result<UserPass<'a>> {
        if items.is_empty() {
            return Err(Error::Empty("behavior sequence"));
        }
        let u = self.user_index(user)?;
        let items = match self.summarizer.history_window() {
            Some(n) if items.len() > n => &items[items.len() - n..],
            _ => items,
        };
        let behaviors = self.behaviors(tape, items)?;
        let w = self.cfg.short_window.min(items.len());
        let recent = tape.rows(behaviors, items.len() - w, w);
        let short = tape.mean_rows(recent);
        let user = tape.gather(self.emb.user, &[u]);
        let ctx = UserContext { items, behaviors, features: &self.features };
        let state = self.summarizer.encode_user(tape, &ctx)?;
        Ok(UserPass { ctx, state, user, short })
    }

    fn target_context(&self, tape: &mut Tape<'_, T>, item: u64) -> Result<TargetContext> {
        let sid = self.features.sid(item)?;
        let category = self.features.category(item)?;
        let t = tape.gather(self.emb.item, &[item as usize]);
        let s = tape.gather(self.emb.sid, &[sid as usize]);
        let query = tape.concat_cols(&[t, s]);
        let behavior_space = if self.cfg.behavior_sid_feature { tape.add(t, s) } else { t };
        Ok(TargetContext { item: item as usize, sid, category, query, sid_emb: s, behavior_space })
    }

    fn head_logits(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let mut h = x;
        for (i, &(w, b)) in self.head.iter().enumerate() {
            let (w, b) = (tape.param(w), tape.param(b));
            h = tape.matmul(h, w);
            h = tape.add_row(h, b);
            if i + 1 < self.head.len() {
                h = tape.sigmoid(h);
            }
        }
        h
    }

    fn target_forward(&self, tape: &mut Tape<'_, T>, pass: &UserPass<'_>, item: u64) -> Result<(Var, Summary<T>)> {
        let target = self.target_context(tape, item)?;
        let summary = self.summarizer.summarize(tape, &pass.ctx, &pass.state, &target)?;
        let x = tape.concat_cols(&[target.query, pass.user, pass.short, summary.out]);
        Ok((self.head_logits(tape, x), summary))
    }

    /// Loss of one user's examples, scaled by `1 / n_total` so that group
    /// losses add up to the batch mean. Returns the loss node, the summed
    /// cross-entropy and the orthogonality value.
    fn group_loss(
        &self,
        tape: &mut Tape<'_, T>,
        examples: &[Example<'_>],
        n_total: usize,
        lambda: f64,
    ) -> Result<(Var, f64, f64)> {
        let first = &examples[0];
        let items = to_indices(first.history);
        let pass = self.encode_user(tape, first.user, &items)?;
        let mut terms = Vec::with_capacity(examples.len() + 1);
        let mut bce = 0.0;
        for ex in examples {
            if ex.label > 1 {
                return Err(Error::InvalidArgument(format!("label {} is not binary", ex.label)));
            }
            let (logits, _) = self.target_forward(tape, &pass, ex.target)?;
            let l = tape.bce_pair(logits, T::lit(ex.label as f64));
            bce += tape.value(l).item().as_f64();
            terms.push(l);
        }
        let mut ortho = 0.0;
        if let Some(o) = self.summarizer.aux_loss(tape, &pass.state)? {
            ortho = tape.value(o).item().as_f64();
            if lambda > 0.0 {
                terms.push(tape.scale(o, T::lit(lambda * examples.len() as f64)));
            }
        }
        let total = tape.sum(&terms);
        Ok((tape.scale(total, T::one() / T::lit(n_total as f64)), bce, ortho))
    }

    /// Mean cross-entropy plus `λ` times the mean orthogonality penalty,
    /// recorded on a single tape.
    pub fn loss_on_tape(&self, tape: &mut Tape<'_, T>, batch: &[Example<'_>], lambda: f64) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut parts = Vec::new();
        for g in group_examples(batch) {
            let group: Vec<Example<'_>> = g.iter().map(|&i| batch[i]).collect();
            parts.push(self.group_loss(tape, &group, batch.len(), lambda)?.0);
        }
        Ok(tape.sum(&parts))
    }

    /// Joint loss and its gradients. Users are processed in parallel and
    /// their gradients merged in batch order, so the result does not
    /// depend on the thread count.
    pub fn joint_loss(&self, batch: &[Example<'_>], lambda: f64) -> Result<(LossStats, Grads<T>)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
        }
        let n = batch.len();
        let parts = group_examples(batch)
            .into_par_iter()
            .map(|g| {
                let group: Vec<Example<'_>> = g.iter().map(|&i| batch[i]).collect();
                let mut tape = Tape::new(&self.params);
                let (loss, bce, ortho) = self.group_loss(&mut tape, &group, n, lambda)?;
                let value = tape.value(loss).item().as_f64();
                Ok((value, bce, ortho * group.len() as f64, tape.backward(loss)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads = Grads::new(self.params.len());
        let mut stats = LossStats { n, ..Default::default() };
        for (loss, bce, ortho, g) in parts {
            stats.loss += loss;
            stats.bce += bce;
            stats.ortho += ortho;
            grads.merge(&g);
        }
        stats.bce /= n as f64;
        stats.ortho /= n as f64;
        Ok((stats, grads))
    }

    /// Positive-class probability of every example, in input order, with
    /// the probe trace when the summarizer produces one.
    pub fn score(&self, examples: &[Example<'_>]) -> Result<Vec<Scored<T>>> {
        let groups = group_examples(examples);
        let scored = groups
            .par_iter()
            .map(|g| {
                let mut tape = Tape::new(&self.params);
                let first = &examples[g[0]];
                let items = to_indices(first.history);
                let pass = self.encode_user(&mut tape, first.user, &items)?;
                g.iter()
                    .map(|&i| {
                        let (logits, summary) = self.target_forward(&mut tape, &pass, examples[i].target)?;
                        let l = tape.value(logits).data();
                        Ok((i, Scored { p: pair_probability(l[0], l[1]), trace: summary.trace }))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out: Vec<Option<Scored<T>>> = vec![None; examples.len()];
        for (i, s) in scored.into_iter().flatten() {
            out[i] = Some(s);
        }
        Ok(out.into_iter().map(|s| s.expect("every example scored")).collect())
    }

    /// Head probability for an already assembled feature row.
    pub fn predict(&self, features: &[T]) -> Result<T> {
        let width = self.head_input_width();
        if features.len() != width {
            return Err(Error::Shape(format!("feature width {} but the head expects {width}", features.len())));
        }
        let mut tape = Tape::new(&self.params);
        let x = tape.input(Matrix::row_vector(features.to_vec()));
        let logits = self.head_logits(&mut tape, x);
        let l = tape.value(logits).data();
        Ok(pair_probability(l[0], l[1]))
    }

    /// The cacheable `2 x d` representation `[e_global; e_local]` of
    /// `history` for every SID in `sids`, sharing one pass over the
    /// sequence.
    pub fn uxsid_embed_many(&self, user: u64, history: &[u64], sids: &[u32]) -> Result<Vec<(Matrix<T>, ForwardTrace<T>)>> {
        let mut tape = Tape::new(&self.params);
        let items = to_indices(history);
        for &i in history {
            self.features.sid(i)?;
        }
        let pass = self.encode_user(&mut tape, user, &items)?;
        sids.iter()
            .map(|&sid| {
                if sid as usize >= self.cfg.n_sids {
                    return Err(Error::UnknownId(format!("SID {sid}")));
                }
                let s = tape.gather(self.emb.sid, &[sid as usize]);
                let (cached, trace) = self
                    .summarizer
                    .cache_embed(&mut tape, &pass.state, s)?
                    .ok_or_else(|| Error::InvalidArgument(format!("strategy {} has no cacheable stage", self.strategy())))?;
                Ok((tape.value(cached).clone(), trace))
            })
            .collect()
    }

    pub fn uxsid_embed(&self, user: u64, history: &[u64], sid: u32) -> Result<(Matrix<T>, ForwardTrace<T>)> {
        Ok(self.uxsid_embed_many(user, history, &[sid])?.remove(0))
    }

    fn online_on_tape(&self, tape: &mut Tape<'_, T>, target: &TargetContext, cached: &Matrix<T>) -> Result<Var> {
        if cached.shape() != (2, self.cfg.d) {
            return Err(Error::Shape(format!("cached embedding {:?}, expected (2, {})", cached.shape(), self.cfg.d)));
        }
        let c = tape.input(cached.clone());
        self.summarizer
            .online(tape, c, target.query)?
            .ok_or_else(|| Error::InvalidArgument(format!("strategy {} has no online stage", self.strategy())))
    }

    /// Target attention over a cached representation; cost depends only on
    /// `d`.
    pub fn online_rank(&self, item: u64, cached: &Matrix<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new(&self.params);
        let target = self.target_context(&mut tape, item)?;
        let out = self.online_on_tape(&mut tape, &target, cached)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Probability from a cached representation. `recent` holds the user's
    /// latest behaviors; only the last `short_window` are read.
    pub fn score_cached(&self, user: u64, recent: &[u64], item: u64, cached: &Matrix<T>) -> Result<T> {
        if recent.is_empty() {
            return Err(Error::Empty("behavior sequence"));
        }
        let u = self.user_index(user)?;
        let w = self.cfg.short_window.min(recent.len());
        let items = to_indices(&recent[recent.len() - w..]);
        let mut tape = Tape::new(&self.params);
        let b = self.behaviors(&mut tape, &items)?;
        let short = tape.mean_rows(b);
        let uv = tape.gather(self.emb.user, &[u]);
        let target = self.target_context(&mut tape, item)?;
        let online = self.online_on_tape(&mut tape, &target, cached)?;
        let c = tape.input(cached.clone());
        let (g, l) = (tape.rows(c, 0, 1), tape.rows(c, 1, 1));
        let x = tape.concat_cols(&[target.query, uv, short, g, l, online]);
        if tape.value(x).cols() != self.head_input_width() {
            return Err(Error::InvalidArgument(format!("strategy {} cannot score from a cache", self.strategy())));
        }
        let logits = self.head_logits(&mut tape, x);
        let l = tape.value(logits).data();
        Ok(pair_probability(l[0], l[1]))
    }

    /// Compressed anchors `P` of a history, for diagnostics.
    pub fn anchors(&self, user: u64, history: &[u64]) -> Result<Matrix<T>> {
        let sid = self.features.sid(history.first().copied().ok_or(Error::Empty("behavior sequence"))?)?;
        Ok(self.uxsid_embed(user, history, sid)?.1.anchors)
    }
}

fn to_indices(items: &[u64]) -> Vec<usize> {
    items.iter().map(|&i| i as usize).collect()
}

/// Indices of `batch` grouped by (user, history length), groups ordered by
/// first appearance.
fn group_examples(batch: &[Example<'_>]) -> Vec<Vec<usize>> {
    let mut slot: HashMap<(u64, usize), usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, ex) in batch.iter().enumerate() {
        let g = *slot.entry((ex.user, ex.history.len())).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    groups
}

/// Mean absolute pairwise cosine between the rows of `p`.
pub fn mean_abs_cosine<T: Real>(p: &Matrix<T>) -> f64 {
    let k = p.rows();
    if k < 2 {
        return 0.0;
    }
    let norms: Vec<f64> = (0..k).map(|r| crate::numerics::dot(p.row(r), p.row(r)).as_f64().sqrt()).collect();
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let c = crate::numerics::dot(p.row(i), p.row(j)).as_f64() / (norms[i] * norms[j]).max(f64::MIN_POSITIVE);
            total += c.abs();
        }
    }
    total / (k * (k - 1) / 2) as f64
}
