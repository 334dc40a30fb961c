//! Latency micro-benchmarks for the online path.
//!
//! Cases are measured in interleaved rounds so that frequency scaling and
//! background load affect every case alike.

use std::hint::black_box;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EmbeddingStore;
use crate::baselines::gsu_soft;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Matrix;

pub const ONLINE: &str = "uxsid-online";
pub const GSU_SOFT: &str = "sim-soft-gsu";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub length: usize,
    pub mean_ns: f64,
    pub p99_ns: f64,
    pub model: String,
}

pub const LATENCY_HEADER: &str = "length,mean_ns,p99_ns,model";

impl LatencyRow {
    pub fn csv_row(&self) -> String {
        format!("{},{:.1},{:.1},{}", self.length, self.mean_ns, self.p99_ns, self.model)
    }
}

fn summarize(mut ns: Vec<u64>) -> (f64, f64) {
    if ns.is_empty() {
        return (0.0, 0.0);
    }
    let mean = ns.iter().sum::<u64>() as f64 / ns.len() as f64;
    ns.sort_unstable();
    let rank = ((ns.len() as f64 * 0.99).ceil() as usize).clamp(1, ns.len());
    (mean, ns[rank - 1] as f64)
}

/// Per-call wall times of `f(case, call)` for every case.
fn interleaved(cases: usize, calls: usize, rounds: usize, mut f: impl FnMut(usize, usize)) -> Vec<Vec<u64>> {
    let mut out = vec![Vec::with_capacity(calls); cases];
    let per_round = calls.div_ceil(rounds.max(1));
    for c in 0..cases {
        for i in 0..per_round.min(calls).min(100) {
            f(c, i);
        }
    }
    let mut done = 0;
    while done < calls {
        let n = per_round.min(calls - done);
        for (c, times) in out.iter_mut().enumerate() {
            for i in done..done + n {
                let t = Instant::now();
                f(c, i);
                times.push(t.elapsed().as_nanos() as u64);
            }
        }
        done += n;
    }
    out
}

fn known_items(model: &Model<f32>) -> Vec<u64> {
    let f = model.features();
    (0..f.len() as u64).filter(|&i| f.sid(i).is_ok()).collect()
}

/// Online ranking from a cached entry, and soft GSU retrieval over the
/// raw sequence, at each sequence length. `impressions` calls per length.
pub fn bench_latency(model: &Model<f32>, lengths: &[usize], impressions: usize, seed: u64) -> Result<Vec<LatencyRow>> {
    if lengths.is_empty() || impressions == 0 || lengths.contains(&0) {
        return Err(Error::InvalidArgument("need at least one positive length and impression".into()));
    }
    let items = known_items(model);
    if items.is_empty() {
        return Err(Error::Empty("items with a SID"));
    }
    let cfg = model.config();
    let emb = model.params().id("emb.item").ok_or_else(|| Error::Format("model has no item embedding".into()))?;
    let table = model.params().value(emb);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<u64> = (0..impressions).map(|_| *items.choose(&mut rng).unwrap()).collect();

    let mut cached = Vec::new();
    let mut seqs = Vec::new();
    for &l in lengths {
        let seq: Vec<u64> = (0..l).map(|_| items[rng.gen_range(0..items.len())]).collect();
        let sid = model.features().sid(targets[0])?;
        cached.push(model.uxsid_embed(0, &seq, sid)?.0);
        let rows: Vec<Vec<f32>> = seq.iter().map(|&i| table.row(i as usize).to_vec()).collect();
        seqs.push(Matrix::from_rows(&rows)?);
    }

    let rounds = 10;
    let mut err = None;
    let online = interleaved(lengths.len(), impressions, rounds, |c, i| {
        if let Err(e) = model.online_rank(targets[i], &cached[c]).map(black_box) {
            err.get_or_insert(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let gsu = interleaved(lengths.len(), impressions, rounds, |c, i| {
        black_box(gsu_soft(&seqs[c], table.row(targets[i] as usize), cfg.gsu_r));
    });

    let mut rows = Vec::new();
    for (name, times) in [(ONLINE, online), (GSU_SOFT, gsu)] {
        for (&length, t) in lengths.iter().zip(times) {
            let (mean_ns, p99_ns) = summarize(t);
            rows.push(LatencyRow { length, mean_ns, p99_ns, model: name.into() });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookupRow {
    pub entries: usize,
    pub mean_ns: f64,
}

/// Point-lookup time at several store sizes. Every size is probed with the
/// same number of distinct present keys, so the comparison reflects the
/// lookup itself rather than how much of the table fits in cache.
pub fn bench_lookup(sizes: &[usize], working_set: usize, lookups: usize, seed: u64) -> Result<Vec<LookupRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stores = Vec::new();
    let mut probes = Vec::new();
    for &n in sizes {
        if n == 0 {
            return Err(Error::InvalidArgument("store size must be positive".into()));
        }
        let mut s = EmbeddingStore::new(1, 0);
        for uid in 0..n as u64 {
            s.insert(uid, 0, &[uid as f32, 0.0])?;
        }
        s.freeze()?;
        let ws: Vec<u64> = (0..working_set.min(n)).map(|_| rng.gen_range(0..n as u64)).collect();
        probes.push(ws);
        stores.push(s);
    }
    let times = interleaved(sizes.len(), lookups, 10, |c, i| {
        let uid = probes[c][i % probes[c].len()];
        black_box(stores[c].lookup(uid, 0).ok().flatten());
    });
    Ok(sizes.iter().zip(times).map(|(&entries, t)| LookupRow { entries, mean_ns: summarize(t).0 }).collect())
}
