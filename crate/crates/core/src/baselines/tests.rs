use super::*;
use crate::model::{ItemFeatures, Model, Registry};
use crate::numerics::ParamStore;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn weights(d: usize, seed: u64) -> AttentionWeights<f64> {
    AttentionWeights { wq: random(2 * d, d, seed), wk: random(d, d, seed + 1), wv: random(d, d, seed + 2) }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn short_sequence_is_not_truncated() {
    let (seq, w) = (random(6, 4, 1), weights(4, 2));
    let q = random(1, 8, 3);
    let full = target_attention(&seq, q.data(), &w).unwrap();
    assert_eq!(truncated_target_attention(&seq, q.data(), 6, &w).unwrap(), full);
    assert_eq!(truncated_target_attention(&seq, q.data(), 100, &w).unwrap(), full);
    assert!(truncated_target_attention(&Matrix::<f64>::zeros(0, 4), q.data(), 3, &w).is_err());
}

#[test]
fn truncation_hides_older_rows() {
    let (mut seq, w) = (random(10, 4, 4), weights(4, 5));
    let q = random(1, 8, 6);
    let before = truncated_target_attention(&seq, q.data(), 3, &w).unwrap();
    for r in 0..7 {
        seq.row_mut(r).iter_mut().for_each(|x| *x = 50.0);
    }
    assert_eq!(truncated_target_attention(&seq, q.data(), 3, &w).unwrap(), before);
}

#[test]
fn hard_retrieval_keeps_most_recent_matches_in_order() {
    let cats = [1, 2, 1, 1, 3, 1, 2, 1];
    let r = gsu_hard(&cats, 1, 3);
    assert_eq!(r.indices, vec![3, 5, 7]);
    assert!(gsu_hard(&cats, 9, 3).is_empty());
    assert_eq!(gsu_hard(&[4; 6], 4, 4).indices, vec![2, 3, 4, 5]);
    assert_eq!(gsu_hard(&cats, 2, 100).indices, vec![1, 6]);
}

#[test]
fn soft_retrieval_prefers_aligned_and_recent() {
    let mut seq = Matrix::<f64>::zeros(5, 3);
    seq.set(2, 0, 1.0);
    seq.set(0, 1, 1.0);
    seq.set(4, 2, 1.0);
    let r = gsu_soft(&seq, &[1.0, 0.0, 0.0], 2);
    assert_eq!(r.indices, vec![2, 4]);
    assert_eq!(r.scores, vec![1.0, 0.0]);
    let all = gsu_soft(&seq, &[0.0, 2.0, 1.0], 10);
    assert_eq!(all.indices, vec![0, 4, 3, 2, 1]);
}

proptest! {
    #[test]
    fn soft_retrieval_matches_full_sort(seed in 0u64..1000, l in 1usize..40, r in 1usize..50) {
        let seq = random(l, 3, seed).map(|x| (x * 4.0).round());
        let t = [1.0, -1.0, 0.5];
        let mut oracle: Vec<(usize, f64)> = (0..l).map(|i| (i, dot(seq.row(i), &t))).collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(b.0.cmp(&a.0)));
        oracle.truncate(r);
        let got = gsu_soft(&seq, &t, r);
        prop_assert_eq!(got.indices, oracle.iter().map(|o| o.0).collect::<Vec<_>>());
    }

    #[test]
    fn hard_retrieval_is_a_time_ordered_subsequence(cats in prop::collection::vec(0u32..4, 0..60), r in 1usize..20) {
        let got = gsu_hard(&cats, 2, r);
        prop_assert!(got.len() <= r);
        prop_assert!(got.indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(got.indices.iter().all(|&i| cats[i] == 2));
    }
}

#[test]
fn esu_edge_cases() {
    let (seq, w) = (random(8, 4, 7), weights(4, 8));
    let q = random(1, 8, 9);
    let (z, ok) = esu_attention(&seq, &RetrievedSubsequence::default(), q.data(), &w).unwrap();
    assert_eq!((z, ok), (vec![0.0; 4], false));

    let one = RetrievedSubsequence { indices: vec![5], scores: vec![1.0] };
    let (out, _) = esu_attention(&seq, &one, q.data(), &w).unwrap();
    let v = Matrix::row_vector(seq.row(5).to_vec()).matmul(&w.wv).unwrap();
    assert!(close(&out, v.data(), 1e-12));

    let twice = RetrievedSubsequence { indices: vec![5, 5, 2, 2], scores: vec![1.0; 4] };
    let once = RetrievedSubsequence { indices: vec![5, 2], scores: vec![1.0; 2] };
    let a = esu_attention(&seq, &twice, q.data(), &w).unwrap().0;
    let b = esu_attention(&seq, &once, q.data(), &w).unwrap().0;
    assert!(close(&a, &b, 1e-12));

    let last = RetrievedSubsequence { indices: (5..8).collect(), scores: vec![1.0; 3] };
    let e = esu_attention(&seq, &last, q.data(), &w).unwrap().0;
    assert!(close(&e, &truncated_target_attention(&seq, q.data(), 3, &w).unwrap(), 1e-12));

    let bad = RetrievedSubsequence { indices: vec![8], scores: vec![1.0] };
    assert!(esu_attention(&seq, &bad, q.data(), &w).is_err());
}

#[test]
fn summarizers_agree_with_reference_functions() {
    let cfg = ModelConfig { d: 4, n_items: 12, n_users: 1, n_sids: 3, trunc_len: 3, gsu_r: 2, ..Default::default() };
    let features = ItemFeatures { sid: (0..12).map(|i| i % 3).collect(), category: (0..12).map(|i| i % 4).collect() };
    let items: Vec<usize> = vec![0, 5, 2, 8, 9, 1, 4];
    for strategy in ["din", "sim-hard", "sim-soft"] {
        let mut ps = ParamStore::<f64>::new();
        let s = Registry::builtin().create(strategy, &cfg, &mut Init::new(&mut ps, 3)).unwrap();
        let prefix = strategy.replace('-', "_");
        let get = |n: &str| ps.value(ps.id(&format!("{prefix}.{n}")).unwrap()).clone();
        let w = AttentionWeights { wq: get("wq"), wk: get("wk"), wv: get("wv") };
        let seq = random(items.len(), 4, 11);
        let target = random(1, 4, 12);
        let query = random(1, 8, 13);

        let mut tape = Tape::new(&ps);
        let behaviors = tape.input(seq.clone());
        let ctx = UserContext { items: &items, behaviors, features: &features };
        let state = s.encode_user(&mut tape, &ctx).unwrap();
        let tc = TargetContext {
            item: 1,
            sid: 1,
            category: 1,
            query: tape.input(query.clone()),
            sid_emb: tape.input(Matrix::zeros(1, 4)),
            behavior_space: tape.input(target.clone()),
        };
        let out = s.summarize(&mut tape, &ctx, &state, &tc).unwrap().out;
        let expected = match strategy {
            "din" => truncated_target_attention(&seq, query.data(), 3, &w).unwrap(),
            "sim-hard" => {
                let cats: Vec<u32> = items.iter().map(|&i| features.category[i]).collect();
                let r = gsu_hard(&cats, 1, 2);
                assert_eq!(r.indices, vec![4, 5]);
                esu_attention(&seq, &r, query.data(), &w).unwrap().0
            }
            _ => esu_attention(&seq, &gsu_soft(&seq, target.data(), 2), query.data(), &w).unwrap().0,
        };
        assert!(close(tape.value(out).data(), &expected, 1e-12), "{strategy}");
    }
}

#[test]
fn hard_retrieval_miss_gives_zero_summary() {
    let cfg = ModelConfig { d: 4, n_items: 6, n_users: 2, n_sids: 2, ..Default::default() };
    let features = ItemFeatures { sid: vec![0, 1, 0, 1, 0, 1], category: vec![0, 0, 0, 0, 0, 7] };
    let m = Model::<f32>::new(ModelConfig { strategy: "sim-hard".into(), ..cfg }, features, 1).unwrap();
    let history = [0u64, 1, 2];
    let ex = [crate::model::Example { user: 0, history: &history, target: 5, label: 1 }];
    let p = m.score(&ex).unwrap()[0].p;
    assert!(p > 0.0 && p < 1.0);
}
