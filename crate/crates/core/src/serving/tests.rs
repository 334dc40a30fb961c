use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bench::{bench_latency, bench_lookup, GSU_SOFT, ONLINE};
use super::*;
use crate::model::{Example, ItemFeatures, ModelConfig};
use crate::numerics::ParamId;
use crate::sidgen::{train_codebooks, CodebookConfig};
use crate::synthdata::{generate, WorldConfig};

/// Byte-at-a-time FNV-1a written out from the published definition.
fn reference_fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 14695981039346656037;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(1099511628211);
    }
    h
}

fn fixture() -> (Dataset, Model<f32>) {
    let ds = generate(&WorldConfig {
        n_clusters: 4,
        items_per_cluster: 8,
        content_dim: 4,
        n_users: 12,
        seq_len: 40,
        distal_window: (0, 5),
        impressions_per_user: 6,
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    let cb = train_codebooks(&ds.items, &CodebookConfig { levels: 2, codewords: 4, kmeans: Default::default() }).unwrap();
    let features = ItemFeatures::from_codebook(&ds.items, &cb).unwrap();
    let base = ModelConfig { d: 6, k_anchors: 3, d_ff: 8, d_g: 4, head_hidden: vec![8], ..Default::default() };
    let model = Model::new(base.sized_for(&features, ds.user_vocab(), 4), features, 2).unwrap();
    (ds, model)
}

fn bytes(store: &EmbeddingStore) -> Vec<u8> {
    let mut b = Vec::new();
    write_store(store, &mut b).unwrap();
    b
}

#[test]
fn key_matches_reference_hash() {
    assert_eq!(make_key(0, 0).0, reference_fnv(&[0; 12]));
    assert_eq!(make_key(0, 0).0, 0x5467_b0da_1d10_6495);
    assert_eq!(make_key(1, 2).0, 0x9f19_854a_6ead_a506);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let (u, s): (u64, u32) = (rng.gen(), rng.gen());
        let mut msg = u.to_le_bytes().to_vec();
        msg.extend_from_slice(&s.to_le_bytes());
        assert_eq!(make_key(u, s).0, reference_fnv(&msg));
    }
}

#[test]
fn a_million_random_pairs_do_not_collide() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut seen = HashSet::with_capacity(1 << 20);
    let mut pairs = HashSet::with_capacity(1 << 20);
    let mut collisions = 0;
    for _ in 0..1_000_000 {
        let p: (u64, u32) = (rng.gen(), rng.gen());
        if pairs.insert(p) && !seen.insert(make_key(p.0, p.1)) {
            collisions += 1;
        }
    }
    assert_eq!(collisions, 0);
}

#[test]
fn store_lifecycle() {
    let mut s = EmbeddingStore::new(1, 7);
    s.insert(3, 1, &[1.0, 2.0]).unwrap();
    s.insert(4, 1, &[3.0, 4.0]).unwrap();
    assert!(s.insert(5, 1, &[1.0]).is_err());
    assert!(matches!(s.lookup(3, 1), Err(Error::Store(_))));
    s.freeze().unwrap();
    assert!(s.insert(6, 1, &[0.0, 0.0]).is_err());
    assert_eq!(s.len(), 2);
    assert_eq!(s.lookup(3, 1).unwrap(), Some(&[1.0, 2.0][..]));
    assert_eq!(s.lookup(3, 2).unwrap(), None);
    assert_eq!(s.misses(), 0);
    assert_eq!(s.fetch_or_zero(9, 9).unwrap().data(), &[0.0, 0.0]);
    assert_eq!(s.fetch_or_zero(4, 1).unwrap().data(), &[3.0, 4.0]);
    assert_eq!(s.misses(), 1);

    let mut dup = EmbeddingStore::new(1, 0);
    dup.insert(1, 1, &[0.0, 0.0]).unwrap();
    dup.insert(1, 1, &[1.0, 1.0]).unwrap();
    assert!(dup.freeze().is_err());
}

#[test]
fn colliding_keys_keep_every_value() {
    let mut s = EmbeddingStore::with_key_fn(1, |u, _| CacheKey(u % 2));
    s.insert(1, 0, &[1.0, 1.0]).unwrap();
    s.insert(3, 0, &[3.0, 3.0]).unwrap();
    s.insert(2, 0, &[2.0, 2.0]).unwrap();
    s.freeze().unwrap();
    assert_eq!((s.len(), s.collisions()), (3, 1));
    assert_eq!(s.lookup(1, 0).unwrap(), Some(&[1.0, 1.0][..]));
    assert_eq!(s.lookup(3, 0).unwrap(), Some(&[3.0, 3.0][..]));
    assert_eq!(s.lookup(2, 0).unwrap(), Some(&[2.0, 2.0][..]));
    assert_eq!(s.lookup(5, 0).unwrap(), None);
}

#[test]
fn precompute_is_schedule_independent_and_matches_direct_calls() {
    let (ds, model) = fixture();
    let plan = default_sid_plan(&model, &ds).unwrap();
    let serial = precompute(&model, &ds, &plan, false).unwrap();
    let parallel = precompute(&model, &ds, &plan, true).unwrap();
    assert_eq!(bytes(&serial), bytes(&parallel));
    assert_eq!(serial.len(), plan.iter().map(|p| p.sids.len()).sum::<usize>());

    let mut reversed = plan.clone();
    reversed.reverse();
    assert_eq!(bytes(&precompute(&model, &ds, &reversed, true).unwrap()), bytes(&serial));

    let u = &ds.users[3];
    let p = plan.iter().find(|p| p.uid == u.user_id).unwrap();
    for &sid in &p.sids {
        let (direct, _) = model.uxsid_embed(u.user_id, &u.items, sid).unwrap();
        assert_eq!(serial.lookup(u.user_id, sid).unwrap().unwrap(), direct.data());
    }
}

#[test]
fn plan_covers_history_and_candidates() {
    let (ds, model) = fixture();
    let plan = default_sid_plan(&model, &ds).unwrap();
    let f = model.features();
    for e in ds.val.iter().chain(&ds.test) {
        let p = plan.iter().find(|p| p.uid == e.user_id).unwrap();
        assert!(p.sids.contains(&f.sid(e.target_item).unwrap()));
    }
    for u in &ds.users {
        let p = plan.iter().find(|p| p.uid == u.user_id).unwrap();
        assert!(p.sids.windows(2).all(|w| w[0] < w[1]));
        assert!(u.items.iter().all(|&i| p.sids.contains(&f.sid(i).unwrap())));
    }
}

#[test]
fn parity_is_exact_and_guarded() {
    let (ds, mut model) = fixture();
    let plan = default_sid_plan(&model, &ds).unwrap();
    let store = precompute(&model, &ds, &plan, true).unwrap();
    let sample = sample_pairs(&plan, 25, 4);
    assert_eq!(sample.len(), 25);
    assert_eq!(sample, sample_pairs(&plan, 25, 4));
    let r = parity_check(&store, &model, &ds, &sample).unwrap();
    assert_eq!((r.max_abs_deviation, r.misses, r.passed), (0.0, 0, true));

    let r = parity_check(&store, &model, &ds, &[(9999, 0)]);
    assert!(r.is_err() || r.unwrap().misses == 1);

    model.params_mut().get_mut(ParamId(0)).value.data_mut()[0] += 1e-3;
    assert!(matches!(parity_check(&store, &model, &ds, &sample), Err(Error::Store(_))));
}

#[test]
fn file_round_trip_is_byte_exact() {
    let (ds, model) = fixture();
    let plan = default_sid_plan(&model, &ds).unwrap();
    let store = precompute(&model, &ds, &plan, true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.uxes");
    save_store(&store, &path).unwrap();
    let loaded = load_store(&path).unwrap();
    assert_eq!(loaded.len(), store.len());
    assert_eq!(bytes(&loaded), std::fs::read(&path).unwrap());
    let r = parity_check(&loaded, &model, &ds, &sample_pairs(&plan, 1000, 0)).unwrap();
    assert_eq!(r.max_abs_deviation, 0.0);

    let raw = bytes(&store);
    for cut in [0, 3, 5, 10, 21, 29, raw.len() / 2, raw.len() - 9, raw.len() - 1] {
        assert!(matches!(read_store(&mut &raw[..cut]), Err(Error::Format(_))), "cut {cut}");
    }
    let mut extra = raw.clone();
    extra.push(0);
    assert!(read_store(&mut extra.as_slice()).is_err());
    let mut bad = raw.clone();
    bad[0] = b'X';
    assert!(read_store(&mut bad.as_slice()).is_err());
    let mut version = raw;
    version[4] = 9;
    assert!(read_store(&mut version.as_slice()).is_err());

    assert!(write_store(&EmbeddingStore::new(2, 0), &mut Vec::new()).is_err());
}

#[test]
fn served_score_equals_full_recompute() {
    let (ds, model) = fixture();
    let plan = default_sid_plan(&model, &ds).unwrap();
    let store = precompute(&model, &ds, &plan, false).unwrap();
    for u in ds.users.iter().take(4) {
        for e in ds.test.iter().filter(|e| e.user_id == u.user_id) {
            let served = serve_score(&model, &store, u.user_id, &u.items, e.target_item).unwrap();
            let full = model
                .score(&[Example { user: u.user_id, history: &u.items, target: e.target_item, label: e.label }])
                .unwrap()[0]
                .p;
            assert_eq!(served, full);
        }
    }
    assert_eq!(store.misses(), 0);

    let empty = {
        let mut s = EmbeddingStore::new(model.config().d, model.params().checksum());
        s.freeze().unwrap();
        s
    };
    let u = &ds.users[0];
    let a = serve_score(&model, &empty, u.user_id, &u.items, 1).unwrap();
    let zero = Matrix::zeros(2, model.config().d);
    assert_eq!(a, model.score_cached(u.user_id, &u.items, 1, &zero).unwrap());
    assert_eq!(empty.misses(), 1);
}

#[test]
fn benches_report_every_case() {
    let (_, model) = fixture();
    let rows = bench_latency(&model, &[50, 500], 200, 1).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().filter(|r| r.model == ONLINE).count(), 2);
    assert_eq!(rows.iter().filter(|r| r.model == GSU_SOFT).count(), 2);
    assert!(rows.iter().all(|r| r.mean_ns > 0.0 && r.p99_ns >= 0.0));
    assert!(bench_latency(&model, &[], 10, 1).is_err());

    let rows = bench_lookup(&[10, 1000], 10, 1000, 3).unwrap();
    assert_eq!(rows.len(), 2);
}
