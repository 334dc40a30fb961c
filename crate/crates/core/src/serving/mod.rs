//! Offline precompute of per-(user, SID) representations, a frozen
//! key-value store for them, and the constant-cost online ranker.

pub mod bench;
mod io;

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use io::{load_store, read_store, save_store, write_store};

use crate::error::{Error, Result};
use crate::hash::Fnv1a64;
use crate::model::Model;
use crate::numerics::Matrix;
use crate::synthdata::Dataset;

/// Store key of a (user, first-layer SID) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey(pub u64);

/// FNV-1a over `le64(uid) ‖ le32(sid)`.
pub fn make_key(uid: u64, sid: u32) -> CacheKey {
    let mut h = Fnv1a64::new();
    h.write(&uid.to_le_bytes());
    h.write(&sid.to_le_bytes());
    CacheKey(h.finish())
}

/// A representation stored under a key shared by several pairs.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Collided {
    pub uid: u64,
    pub sid: u32,
    pub value: Vec<f32>,
}

/// Maps (user, SID) to a cached `2 x d` representation. Entries are added
/// before [`EmbeddingStore::freeze`]; lookups are allowed only after it.
#[derive(Debug)]
pub struct EmbeddingStore {
    d: usize,
    params_checksum: u64,
    frozen: bool,
    keys: Vec<CacheKey>,
    values: Vec<f32>,
    index: HashMap<CacheKey, u32>,
    /// Keys produced by more than one pair, with every pair's value.
    collided: HashMap<CacheKey, Vec<Collided>>,
    pending: Vec<(u64, u32, Vec<f32>)>,
    misses: AtomicU64,
    key_fn: fn(u64, u32) -> CacheKey,
}

impl EmbeddingStore {
    pub fn new(d: usize, params_checksum: u64) -> Self {
        Self {
            d,
            params_checksum,
            frozen: false,
            keys: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            collided: HashMap::new(),
            pending: Vec::new(),
            misses: AtomicU64::new(0),
            key_fn: make_key,
        }
    }

    /// A store keyed by `key_fn`, to exercise collision handling.
    #[cfg(test)]
    pub(crate) fn with_key_fn(d: usize, key_fn: fn(u64, u32) -> CacheKey) -> Self {
        Self { key_fn, ..Self::new(d, 0) }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Checksum of the parameters the entries were computed with.
    pub fn params_checksum(&self) -> u64 {
        self.params_checksum
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Number of stored (user, SID) pairs.
    pub fn len(&self) -> usize {
        if self.frozen {
            self.keys.len() + self.collided.values().map(Vec::len).sum::<usize>()
        } else {
            self.pending.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keys shared by distinct pairs.
    pub fn collisions(&self) -> usize {
        self.collided.len()
    }

    pub fn insert(&mut self, uid: u64, sid: u32, value: &[f32]) -> Result<()> {
        if self.frozen {
            return Err(Error::Store("store is frozen".into()));
        }
        if value.len() != 2 * self.d {
            return Err(Error::Shape(format!("entry of {} values, expected {}", value.len(), 2 * self.d)));
        }
        self.pending.push((uid, sid, value.to_vec()));
        Ok(())
    }

    /// Builds the lookup index. Records are ordered by key, so the result
    /// does not depend on insertion order.
    pub fn freeze(&mut self) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        let mut pending = std::mem::take(&mut self.pending);
        pending.sort_by_key(|a| (a.0, a.1));
        if let Some(w) = pending.windows(2).find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(Error::Store(format!("duplicate entry for user {} SID {}", w[0].0, w[0].1)));
        }
        let mut by_key: Vec<(CacheKey, u64, u32, Vec<f32>)> =
            pending.into_iter().map(|(u, s, v)| ((self.key_fn)(u, s), u, s, v)).collect();
        by_key.sort_by_key(|e| (e.0, e.1, e.2));

        let mut i = 0;
        while i < by_key.len() {
            let mut j = i + 1;
            while j < by_key.len() && by_key[j].0 == by_key[i].0 {
                j += 1;
            }
            if j - i == 1 {
                self.push_record(by_key[i].0, &by_key[i].3);
            } else {
                let group = by_key[i..j].iter().map(|e| Collided { uid: e.1, sid: e.2, value: e.3.clone() }).collect();
                self.collided.insert(by_key[i].0, group);
            }
            i = j;
        }
        self.frozen = true;
        Ok(())
    }

    pub(crate) fn push_record(&mut self, key: CacheKey, value: &[f32]) {
        self.index.insert(key, self.keys.len() as u32);
        self.keys.push(key);
        self.values.extend_from_slice(value);
    }

    pub(crate) fn push_collided(&mut self, key: CacheKey, entry: Collided) {
        self.collided.entry(key).or_default().push(entry);
    }

    pub(crate) fn mark_frozen(&mut self) {
        self.frozen = true;
    }

    pub(crate) fn records(&self) -> impl Iterator<Item = (CacheKey, &[f32])> {
        self.keys.iter().copied().zip(self.values.chunks_exact(2 * self.d.max(1)))
    }

    pub(crate) fn collided_entries(&self) -> Vec<(CacheKey, &Collided)> {
        let mut out: Vec<_> = self.collided.iter().flat_map(|(k, v)| v.iter().map(move |c| (*k, c))).collect();
        out.sort_by_key(|(k, c)| (*k, c.uid, c.sid));
        out
    }

    /// The stored `2d` values of a pair, or `None` when absent.
    pub fn lookup(&self, uid: u64, sid: u32) -> Result<Option<&[f32]>> {
        if !self.frozen {
            return Err(Error::Store("lookup before freeze".into()));
        }
        let key = (self.key_fn)(uid, sid);
        if let Some(&i) = self.index.get(&key) {
            let w = 2 * self.d;
            return Ok(Some(&self.values[i as usize * w..(i as usize + 1) * w]));
        }
        Ok(self
            .collided
            .get(&key)
            .and_then(|g| g.iter().find(|c| c.uid == uid && c.sid == sid))
            .map(|c| c.value.as_slice()))
    }

    /// As [`lookup`](Self::lookup), but a miss yields zeros and is counted.
    pub fn fetch_or_zero(&self, uid: u64, sid: u32) -> Result<Matrix<f32>> {
        let data = match self.lookup(uid, sid)? {
            Some(v) => v.to_vec(),
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                vec![0.0; 2 * self.d]
            }
        };
        Matrix::from_vec(2, self.d, data)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}

/// SIDs to precompute for one user.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSids {
    pub uid: u64,
    pub sids: Vec<u32>,
}

/// Per user: the first-layer SIDs of the history and of the user's
/// validation and test candidates, ascending.
pub fn default_sid_plan(model: &Model<f32>, ds: &Dataset) -> Result<Vec<UserSids>> {
    let feats = model.features();
    let mut cands: HashMap<u64, BTreeSet<u32>> = HashMap::new();
    for e in ds.val.iter().chain(&ds.test) {
        cands.entry(e.user_id).or_default().insert(feats.sid(e.target_item)?);
    }
    ds.users
        .iter()
        .filter(|u| !u.items.is_empty())
        .map(|u| {
            let mut set = cands.remove(&u.user_id).unwrap_or_default();
            for &i in &u.items {
                set.insert(feats.sid(i)?);
            }
            Ok(UserSids { uid: u.user_id, sids: set.into_iter().collect() })
        })
        .collect()
}

/// One entry per planned pair, computed from the user's full history.
/// `parallel` only changes the schedule; the store is the same either way.
pub fn precompute(model: &Model<f32>, ds: &Dataset, plan: &[UserSids], parallel: bool) -> Result<EmbeddingStore> {
    let one = |p: &UserSids| -> Result<Vec<(u64, u32, Vec<f32>)>> {
        let u = ds.user_index(p.uid).ok_or_else(|| Error::UnknownId(format!("user {}", p.uid)))?;
        let embs = model.uxsid_embed_many(p.uid, &ds.users[u].items, &p.sids)?;
        Ok(p.sids.iter().zip(embs).map(|(&s, (m, _))| (p.uid, s, m.into_data())).collect())
    };
    let parts: Vec<Vec<_>> = if parallel {
        plan.par_iter().map(one).collect::<Result<_>>()?
    } else {
        plan.iter().map(one).collect::<Result<_>>()?
    };
    let mut store = EmbeddingStore::new(model.config().d, model.params().checksum());
    for (uid, sid, v) in parts.into_iter().flatten() {
        store.insert(uid, sid, &v)?;
    }
    store.freeze()?;
    Ok(store)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParityReport {
    pub sampled: usize,
    pub misses: usize,
    pub max_abs_deviation: f64,
    pub passed: bool,
}

pub const PARITY_TOLERANCE: f64 = 1e-6;

/// Recomputes each sampled pair from scratch and compares it with the
/// cached value. Refused when the model is not the one the store was
/// built from.
pub fn parity_check(store: &EmbeddingStore, model: &Model<f32>, ds: &Dataset, sample: &[(u64, u32)]) -> Result<ParityReport> {
    if store.params_checksum() != model.params().checksum() {
        return Err(Error::Store("model parameters differ from those used for precompute".into()));
    }
    let devs = sample
        .par_iter()
        .map(|&(uid, sid)| {
            let Some(cached) = store.lookup(uid, sid)? else {
                return Ok(None);
            };
            let u = ds.user_index(uid).ok_or_else(|| Error::UnknownId(format!("user {uid}")))?;
            let (fresh, _) = model.uxsid_embed(uid, &ds.users[u].items, sid)?;
            let dev = fresh.data().iter().zip(cached).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
            Ok(Some(dev))
        })
        .collect::<Result<Vec<_>>>()?;
    let misses = devs.iter().filter(|d| d.is_none()).count();
    let max = devs.iter().flatten().copied().fold(0.0, f64::max);
    Ok(ParityReport { sampled: sample.len(), misses, max_abs_deviation: max, passed: misses == 0 && max <= PARITY_TOLERANCE })
}

/// Up to `n` distinct planned pairs chosen with a seeded generator, in
/// plan order.
pub fn sample_pairs(plan: &[UserSids], n: usize, seed: u64) -> Vec<(u64, u32)> {
    use rand::seq::index::sample;
    use rand::SeedableRng;
    let all: Vec<(u64, u32)> = plan.iter().flat_map(|p| p.sids.iter().map(move |&s| (p.uid, s))).collect();
    if n >= all.len() {
        return all;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, all.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| all[i]).collect()
}

/// Click probability served from the store: the target's first-layer SID
/// selects the cached entry, with a zero fallback on a miss.
pub fn serve_score(model: &Model<f32>, store: &EmbeddingStore, uid: u64, recent: &[u64], item: u64) -> Result<f32> {
    let sid = model.features().sid(item)?;
    let cached = store.fetch_or_zero(uid, sid)?;
    model.score_cached(uid, recent, item, &cached)
}

#[cfg(test)]
mod tests;
