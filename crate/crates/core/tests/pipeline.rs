use uxsid_core::model::{load_checkpoint, save_checkpoint, Example, ItemFeatures, Model, ModelConfig};
use uxsid_core::serving::{
    default_sid_plan, load_store, parity_check, precompute, sample_pairs, save_store, serve_score,
};
use uxsid_core::sidgen::{encode_items, read_sids_jsonl, train_codebooks, write_sids_jsonl, CodebookConfig};
use uxsid_core::synthdata::{generate, load_jsonl, save_jsonl, WorldConfig};
use uxsid_core::trainer::{evaluate, train, TrainConfig};

fn world() -> WorldConfig {
    WorldConfig {
        n_clusters: 6,
        items_per_cluster: 12,
        content_dim: 6,
        n_users: 60,
        seq_len: 150,
        distal_window: (0, 15),
        impressions_per_user: 10,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn files_to_served_scores() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let generated = generate(&world()).unwrap();
    save_jsonl(&generated, &data).unwrap();
    let ds = load_jsonl(&data, None).unwrap();
    assert_eq!(ds.users, generated.users);
    assert_eq!(ds.test, generated.test);

    let cb = train_codebooks(&ds.items, &CodebookConfig { levels: 2, codewords: 6, kmeans: Default::default() }).unwrap();
    let sids_path = dir.path().join("sids.jsonl");
    write_sids_jsonl(&sids_path, &encode_items(&cb, &ds.items).unwrap()).unwrap();
    let feats = ItemFeatures::from_parts(&ds.items, &read_sids_jsonl(&sids_path).unwrap()).unwrap();
    assert_eq!(feats, ItemFeatures::from_codebook(&ds.items, &cb).unwrap());

    let cfg = ModelConfig { d: 8, k_anchors: 4, d_ff: 16, d_g: 8, head_hidden: vec![16], trunc_len: 20, ..Default::default() }
        .sized_for(&feats, ds.user_vocab(), 0);
    let tc = TrainConfig { learning_rate: 0.01, batch_size: 64, epochs: 3, ..Default::default() };
    let out = train(Model::new(cfg, feats, 1).unwrap(), &ds, &tc).unwrap();

    let ckpt = dir.path().join("ckpt");
    save_checkpoint(&out.model, &ckpt).unwrap();
    let model = load_checkpoint(&ckpt).unwrap();
    assert_eq!(model.params().checksum(), out.model.params().checksum());
    assert_eq!(evaluate(&model, &ds, &ds.test, 50).unwrap(), evaluate(&out.model, &ds, &ds.test, 50).unwrap());

    let plan = default_sid_plan(&model, &ds).unwrap();
    let store_path = dir.path().join("store.uxes");
    save_store(&precompute(&model, &ds, &plan, true).unwrap(), &store_path).unwrap();
    let store = load_store(&store_path).unwrap();
    let report = parity_check(&store, &model, &ds, &sample_pairs(&plan, 200, 1)).unwrap();
    assert!(report.passed, "{report:?}");

    for e in &ds.test {
        let u = &ds.users[ds.user_index(e.user_id).unwrap()];
        let served = serve_score(&model, &store, e.user_id, &u.items, e.target_item).unwrap();
        let ex = Example { user: e.user_id, history: &u.items, target: e.target_item, label: e.label };
        assert_eq!(served, model.score(&[ex]).unwrap()[0].p);
    }
    assert_eq!(store.misses(), 0);
}

#[test]
fn truncating_history_hides_the_planted_window() {
    let ds = generate(&world()).unwrap();
    let cut = ds.truncated(100);
    let cat = ds.categories();
    for (full, short) in ds.users.iter().zip(&cut.users) {
        assert_eq!(short.items.len(), 100);
        assert_eq!(short.items, full.items[50..]);
        let planted = cat[full.items[0] as usize];
        let from_window = full.items[..15].iter().filter(|&&i| cat[i as usize] == planted).count();
        assert_eq!(from_window, 15);
    }
    assert!(cut.test.iter().all(|e| e.history_len == 100));
}
