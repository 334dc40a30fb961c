//! Seeded synthetic recommendation world and the dataset container shared
//! by training, evaluation and serving.
//!
//! Each user has a sparse mixture over item clusters. Behaviors are sampled
//! from that mixture, except that positions inside `distal_window` are
//! forced to the user's rarest interest, which appears nowhere else in the
//! history. An impression is relevant when its item's cluster is one of the
//! user's interests (the distal one included), and relevant impressions are
//! labelled positive with probability `1 - label_noise`.

mod io;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use io::{load_jsonl, save_jsonl, ITEMS_FILE, INTERACTIONS_FILE, META_FILE};

use crate::error::{Error, Result};
use crate::hash::Fnv1a64;
use crate::sidgen::ContentVector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_clusters: usize,
    pub items_per_cluster: usize,
    pub content_dim: usize,
    /// Standard deviation of item vectors around their cluster mean.
    pub cluster_spread: f64,
    pub n_users: usize,
    pub interests_per_user: usize,
    pub seq_len: usize,
    /// Half-open position range `[start, end)`, counted from the sequence
    /// start, holding the planted behaviors.
    pub distal_window: (usize, usize),
    /// Probability that an impression targets one of the user's interests.
    pub positive_rate: f64,
    pub label_noise: f64,
    /// Probability that a non-planted behavior is drawn uniformly from all
    /// items instead of from the interest mixture.
    pub background_rate: f64,
    pub impressions_per_user: usize,
    pub val_per_user: usize,
    pub test_per_user: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_clusters: 32,
            items_per_cluster: 100,
            content_dim: 16,
            cluster_spread: 0.15,
            n_users: 2000,
            interests_per_user: 3,
            seq_len: 2000,
            distal_window: (0, 100),
            positive_rate: 0.5,
            label_noise: 0.05,
            background_rate: 0.05,
            impressions_per_user: 10,
            val_per_user: 2,
            test_per_user: 2,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_clusters == 0
            || self.items_per_cluster == 0
            || self.content_dim == 0
            || self.n_users == 0
            || self.interests_per_user == 0
            || self.seq_len == 0
            || self.impressions_per_user == 0
        {
            return bad("world counts must be at least 1");
        }
        if self.interests_per_user >= self.n_clusters {
            return bad("interests_per_user must leave at least one non-interest cluster");
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad("label_noise must lie in [0, 0.5)");
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return bad("positive_rate must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.background_rate) {
            return bad("background_rate must lie in [0, 1]");
        }
        let (s, e) = self.distal_window;
        if s >= e || e > self.seq_len {
            return bad("distal_window must be a non-empty range inside [0, seq_len)");
        }
        if self.val_per_user + self.test_per_user >= self.impressions_per_user {
            return bad("held-out impressions must leave at least one training impression");
        }
        if !(self.cluster_spread >= 0.0) {
            return bad("cluster_spread must be non-negative");
        }
        Ok(())
    }

    pub fn n_items(&self) -> usize {
        self.n_clusters * self.items_per_cluster
    }

    /// AUC of the scorer that knows exactly which impressions are relevant.
    pub fn bayes_auc(&self) -> f64 {
        bayes_auc(self.positive_rate, self.label_noise)
    }
}

/// AUC of a two-level oracle score: relevant impressions (prior `pi`) are
/// positive with probability `1 - eps`, irrelevant ones with probability
/// `eps`.
pub fn bayes_auc(pi: f64, eps: f64) -> f64 {
    let pos = pi * (1.0 - eps) + (1.0 - pi) * eps;
    let neg = 1.0 - pos;
    // P(relevant | label) for each class.
    let a = pi * (1.0 - eps) / pos;
    let b = pi * eps / neg;
    a * (1.0 - b) + 0.5 * (a * b + (1.0 - a) * (1.0 - b))
}

/// Held-out impressions per user, taken from the end of the timeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub val_per_user: usize,
    pub test_per_user: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { val_per_user: 1, test_per_user: 1 }
    }
}

/// Time-ordered behavior history of one user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: u64,
    pub items: Vec<u64>,
    pub ts: Vec<u64>,
}

/// A labelled impression. Its behavior sequence is the first `history_len`
/// entries of the user's history (everything strictly before `ts`); the
/// target SID comes from the item's codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub user_id: u64,
    pub target_item: u64,
    pub ts: u64,
    pub label: u8,
    pub history_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct DatasetMeta {
    pub world: Option<WorldConfig>,
    pub bayes_auc: Option<f64>,
    pub split: SplitConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Sorted by item id.
    pub items: Vec<ContentVector>,
    /// Sorted by user id.
    pub users: Vec<UserHistory>,
    pub train: Vec<TrainingExample>,
    pub val: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
    pub meta: DatasetMeta,
}

impl Dataset {
    /// Position of `user_id` in `users`.
    pub fn user_index(&self, user_id: u64) -> Option<usize> {
        self.users.binary_search_by_key(&user_id, |u| u.user_id).ok()
    }

    pub fn history(&self, ex: &TrainingExample) -> Result<&[u64]> {
        let u = self
            .user_index(ex.user_id)
            .ok_or_else(|| Error::UnknownId(format!("user {}", ex.user_id)))?;
        Ok(&self.users[u].items[..ex.history_len])
    }

    pub fn item_vocab(&self) -> usize {
        self.items.iter().map(|i| i.item_id as usize + 1).max().unwrap_or(0)
    }

    pub fn user_vocab(&self) -> usize {
        self.users.iter().map(|u| u.user_id as usize + 1).max().unwrap_or(0)
    }

    /// Category of every item id (`u32::MAX` for ids without a vector).
    pub fn categories(&self) -> Vec<u32> {
        let mut out = vec![u32::MAX; self.item_vocab()];
        for it in &self.items {
            out[it.item_id as usize] = it.category;
        }
        out
    }

    /// Copy with every history cut to its most recent `max_len` behaviors.
    pub fn truncated(&self, max_len: usize) -> Dataset {
        let mut out = self.clone();
        let mut cut = Vec::with_capacity(out.users.len());
        for u in &mut out.users {
            let drop = u.items.len().saturating_sub(max_len);
            u.items.drain(..drop);
            u.ts.drain(..drop);
            cut.push(drop);
        }
        for ex in out.train.iter_mut().chain(out.val.iter_mut()).chain(out.test.iter_mut()) {
            let u = out.users.binary_search_by_key(&ex.user_id, |u| u.user_id).unwrap();
            ex.history_len = ex.history_len.saturating_sub(cut[u]);
        }
        out
    }
}

fn derived_seed(seed: u64, tag: &[u8], index: u64) -> u64 {
    let mut h = Fnv1a64::new();
    h.write(&seed.to_le_bytes());
    h.write(tag);
    h.write(&index.to_le_bytes());
    h.finish()
}

struct UserDraw {
    history: UserHistory,
    impressions: Vec<TrainingExample>,
}

/// Builds the synthetic world described by `cfg`.
pub fn generate(cfg: &WorldConfig) -> Result<Dataset> {
    cfg.validate()?;
    let g = cfg.n_clusters;
    let ipc = cfg.items_per_cluster;

    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, b"items", 0));
    let unit = Normal::new(0.0, 1.0).unwrap();
    let means: Vec<Vec<f64>> =
        (0..g).map(|_| (0..cfg.content_dim).map(|_| unit.sample(&mut rng)).collect()).collect();
    let mut items = Vec::with_capacity(cfg.n_items());
    for (c, mean) in means.iter().enumerate() {
        for i in 0..ipc {
            let z = mean.iter().map(|&m| (m + cfg.cluster_spread * unit.sample(&mut rng)) as f32).collect();
            items.push(ContentVector { item_id: (c * ipc + i) as u64, z, category: c as u32 });
        }
    }

    let draws: Vec<UserDraw> = (0..cfg.n_users)
        .into_par_iter()
        .map(|u| draw_user(cfg, u))
        .collect();

    let held = cfg.val_per_user + cfg.test_per_user;
    let n_train = cfg.impressions_per_user - held;
    let mut ds = Dataset {
        items,
        users: Vec::with_capacity(cfg.n_users),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        meta: DatasetMeta {
            world: Some(cfg.clone()),
            bayes_auc: Some(cfg.bayes_auc()),
            split: SplitConfig { val_per_user: cfg.val_per_user, test_per_user: cfg.test_per_user },
        },
    };
    for d in draws {
        let mut imps = d.impressions.into_iter();
        ds.train.extend(imps.by_ref().take(n_train));
        ds.val.extend(imps.by_ref().take(cfg.val_per_user));
        ds.test.extend(imps);
        ds.users.push(d.history);
    }
    Ok(ds)
}

fn draw_user(cfg: &WorldConfig, u: usize) -> UserDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, b"user", u as u64));
    let g = cfg.n_clusters;
    let ipc = cfg.items_per_cluster;

    let mut clusters: Vec<usize> = (0..g).collect();
    clusters.shuffle(&mut rng);
    let interests: Vec<usize> = clusters[..cfg.interests_per_user].to_vec();
    let others: Vec<usize> = clusters[cfg.interests_per_user..].to_vec();
    let gamma = Gamma::new(1.0, 1.0).unwrap();
    let weights: Vec<f64> = interests.iter().map(|_| gamma.sample(&mut rng) + 1e-12).collect();
    let rarest = (0..weights.len())
        .min_by(|&a, &b| weights[a].partial_cmp(&weights[b]).unwrap())
        .unwrap();
    let distal = interests[rarest];
    let mixture: Vec<(usize, f64)> = interests
        .iter()
        .zip(&weights)
        .filter(|(&c, _)| c != distal)
        .map(|(&c, &w)| (c, w))
        .collect();
    let mix_total: f64 = mixture.iter().map(|(_, w)| w).sum();

    let item_in = |c: usize, rng: &mut ChaCha8Rng| (c * ipc + rng.gen_range(0..ipc)) as u64;
    let mut items = Vec::with_capacity(cfg.seq_len);
    for t in 0..cfg.seq_len {
        let item = if t >= cfg.distal_window.0 && t < cfg.distal_window.1 {
            item_in(distal, &mut rng)
        } else if mixture.is_empty() || rng.gen::<f64>() < cfg.background_rate {
            rng.gen_range(0..(g * ipc)) as u64
        } else {
            let mut x = rng.gen::<f64>() * mix_total;
            let mut pick = mixture[mixture.len() - 1].0;
            for &(c, w) in &mixture {
                if x < w {
                    pick = c;
                    break;
                }
                x -= w;
            }
            item_in(pick, &mut rng)
        };
        items.push(item);
    }

    let user_id = u as u64;
    let seq_len = cfg.seq_len;
    let impressions = (0..cfg.impressions_per_user)
        .map(|j| {
            let relevant = rng.gen::<f64>() < cfg.positive_rate;
            let cluster = if relevant {
                interests[rng.gen_range(0..interests.len())]
            } else {
                others[rng.gen_range(0..others.len())]
            };
            let target_item = item_in(cluster, &mut rng);
            let p = if relevant { 1.0 - cfg.label_noise } else { cfg.label_noise };
            let label = u8::from(rng.gen::<f64>() < p);
            TrainingExample { user_id, target_item, ts: (seq_len + j) as u64, label, history_len: seq_len }
        })
        .collect();

    UserDraw {
        history: UserHistory { user_id, items, ts: (0..seq_len as u64).collect() },
        impressions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            n_clusters: 6,
            items_per_cluster: 5,
            content_dim: 4,
            n_users: 20,
            seq_len: 60,
            distal_window: (0, 6),
            impressions_per_user: 6,
            val_per_user: 1,
            test_per_user: 2,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_relevant_impressions_are_positive() {
        let cfg = WorldConfig { label_noise: 0.0, ..small() };
        let ds = generate(&cfg).unwrap();
        let cat = ds.categories();
        let seen = |u: &UserHistory, c: u32| u.items.iter().any(|&i| cat[i as usize] == c);
        for ex in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            let user = &ds.users[ds.user_index(ex.user_id).unwrap()];
            let c = cat[ex.target_item as usize];
            // Relevant clusters show up at least in the mixture or the
            // planted window; irrelevant ones only through background noise.
            if ex.label == 1 {
                assert!(seen(user, c));
            }
        }
        let positives = ds.train.iter().filter(|e| e.label == 1).count();
        assert!(positives > 0);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&WorldConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.users, c.users);
    }

    #[test]
    fn planted_window_precedes_truncation_window() {
        let cfg = WorldConfig { seq_len: 2000, distal_window: (0, 100), n_users: 5, ..small() };
        let ds = generate(&cfg).unwrap();
        let cat = ds.categories();
        let keep = 100;
        for u in &ds.users {
            let planted = cat[u.items[0] as usize];
            assert!(u.items[..100].iter().all(|&i| cat[i as usize] == planted));
            let visible: Vec<usize> = (u.items.len() - keep..u.items.len()).collect();
            assert!(visible.iter().all(|&p| p >= cfg.distal_window.1));
            let trunc = ds.truncated(keep);
            let tu = &trunc.users[trunc.user_index(u.user_id).unwrap()];
            assert_eq!(tu.items.as_slice(), &u.items[u.items.len() - keep..]);
        }
    }

    #[test]
    fn splits_are_time_ordered_and_disjoint() {
        let ds = generate(&small()).unwrap();
        assert_eq!(ds.train.len(), 20 * 3);
        assert_eq!(ds.val.len(), 20);
        assert_eq!(ds.test.len(), 40);
        for u in 0..20u64 {
            let max_train = ds.train.iter().filter(|e| e.user_id == u).map(|e| e.ts).max().unwrap();
            let min_val = ds.val.iter().filter(|e| e.user_id == u).map(|e| e.ts).min().unwrap();
            let min_test = ds.test.iter().filter(|e| e.user_id == u).map(|e| e.ts).min().unwrap();
            assert!(max_train < min_val && min_val < min_test);
        }
    }

    #[test]
    fn bayes_auc_closed_form() {
        assert_eq!(bayes_auc(0.5, 0.0), 1.0);
        // eps = 0.5 makes labels independent of relevance.
        assert!((bayes_auc(0.3, 0.4999999) - 0.5).abs() < 1e-6);
        // Enumerate the 2x2 joint directly.
        let (pi, eps) = (0.4, 0.1);
        let p_rel_pos = pi * (1.0 - eps);
        let p_irr_pos = (1.0 - pi) * eps;
        let p_rel_neg = pi * eps;
        let p_irr_neg = (1.0 - pi) * (1.0 - eps);
        let pos = p_rel_pos + p_irr_pos;
        let neg = p_rel_neg + p_irr_neg;
        let win = p_rel_pos * p_irr_neg / (pos * neg);
        let tie = (p_rel_pos * p_rel_neg + p_irr_pos * p_irr_neg) / (pos * neg);
        assert!((bayes_auc(pi, eps) - (win + 0.5 * tie)).abs() < 1e-12);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        assert!(generate(&WorldConfig { label_noise: 0.5, ..small() }).is_err());
        assert!(generate(&WorldConfig { distal_window: (10, 100), ..small() }).is_err());
        assert!(generate(&WorldConfig { n_users: 0, ..small() }).is_err());
        assert!(generate(&WorldConfig { val_per_user: 3, test_per_user: 3, ..small() }).is_err());
    }
}
