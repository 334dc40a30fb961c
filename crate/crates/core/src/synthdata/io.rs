use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, SplitConfig, TrainingExample, UserHistory};
use crate::error::{Error, Result};
use crate::sidgen::{read_content_jsonl, write_content_jsonl};

pub const ITEMS_FILE: &str = "items.jsonl";
pub const INTERACTIONS_FILE: &str = "interactions.jsonl";
pub const META_FILE: &str = "meta.json";

/// One line of `interactions.jsonl`. Rows without a label are history
/// behaviors; labelled rows are impressions.
#[derive(Debug, Serialize, Deserialize)]
struct Interaction {
    user_id: u64,
    item_id: u64,
    ts: u64,
    label: Option<u8>,
}

pub fn save_jsonl(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_content_jsonl(&dir.join(ITEMS_FILE), &ds.items)?;

    let mut by_user: BTreeMap<u64, Vec<&TrainingExample>> = BTreeMap::new();
    for ex in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        by_user.entry(ex.user_id).or_default().push(ex);
    }
    let mut w = BufWriter::new(File::create(dir.join(INTERACTIONS_FILE))?);
    for u in &ds.users {
        for (&item_id, &ts) in u.items.iter().zip(&u.ts) {
            write_line(&mut w, &Interaction { user_id: u.user_id, item_id, ts, label: None })?;
        }
        let mut imps = by_user.remove(&u.user_id).unwrap_or_default();
        imps.sort_by_key(|e| e.ts);
        for ex in imps {
            let row = Interaction { user_id: ex.user_id, item_id: ex.target_item, ts: ex.ts, label: Some(ex.label) };
            write_line(&mut w, &row)?;
        }
    }
    w.flush()?;

    let meta = serde_json::to_string_pretty(&ds.meta)?;
    std::fs::write(dir.join(META_FILE), meta + "\n")?;
    Ok(())
}

fn write_line(w: &mut impl Write, row: &Interaction) -> Result<()> {
    serde_json::to_writer(&mut *w, row)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Loads `items.jsonl`, `interactions.jsonl` and (when present)
/// `meta.json` from `dir`. Each user's impressions are split by time: the
/// last `test_per_user` go to test, the `val_per_user` before them to
/// validation, the rest to training. `split` overrides the split stored in
/// the metadata. Impressions with no earlier behavior are dropped.
pub fn load_jsonl(dir: &Path, split: Option<SplitConfig>) -> Result<Dataset> {
    let items = read_content_jsonl(&dir.join(ITEMS_FILE))?;
    let mut items = items;
    items.sort_by_key(|i| i.item_id);
    let known: HashSet<u64> = items.iter().map(|i| i.item_id).collect();

    let meta_path = dir.join(META_FILE);
    let mut meta: DatasetMeta = if meta_path.exists() {
        serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?
    } else {
        DatasetMeta::default()
    };
    if let Some(s) = split {
        meta.split = s;
    }

    let reader = BufReader::new(File::open(dir.join(INTERACTIONS_FILE))?);
    let mut behaviors: BTreeMap<u64, Vec<(u64, u64)>> = BTreeMap::new();
    let mut impressions: BTreeMap<u64, Vec<(u64, u64, u8)>> = BTreeMap::new();
    let mut n_lines = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        n_lines += 1;
        let row: Interaction =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        if !known.contains(&row.item_id) {
            return Err(Error::Parse { line: i + 1, msg: format!("item {} has no content vector", row.item_id) });
        }
        match row.label {
            None => behaviors.entry(row.user_id).or_default().push((row.ts, row.item_id)),
            Some(l @ (0 | 1)) => impressions.entry(row.user_id).or_default().push((row.ts, row.item_id, l)),
            Some(l) => return Err(Error::Parse { line: i + 1, msg: format!("label {l} is not binary") }),
        }
    }
    if n_lines == 0 {
        return Err(Error::Empty("interactions file"));
    }

    let mut ds = Dataset { items, users: Vec::new(), train: Vec::new(), val: Vec::new(), test: Vec::new(), meta };
    let user_ids: std::collections::BTreeSet<u64> = behaviors.keys().chain(impressions.keys()).copied().collect();
    for user_id in user_ids {
        let mut hist = behaviors.remove(&user_id).unwrap_or_default();
        hist.sort_by_key(|&(ts, _)| ts);
        let ts: Vec<u64> = hist.iter().map(|&(t, _)| t).collect();
        let mut imps = impressions.remove(&user_id).unwrap_or_default();
        imps.sort_by_key(|&(t, _, _)| t);
        let examples: Vec<TrainingExample> = imps
            .into_iter()
            .map(|(t, item, label)| TrainingExample {
                user_id,
                target_item: item,
                ts: t,
                label,
                history_len: ts.partition_point(|&x| x < t),
            })
            .filter(|e| e.history_len > 0)
            .collect();
        let n = examples.len();
        let n_test = ds.meta.split.test_per_user.min(n);
        let n_val = ds.meta.split.val_per_user.min(n - n_test);
        let n_train = n - n_test - n_val;
        let mut it = examples.into_iter();
        ds.train.extend(it.by_ref().take(n_train));
        ds.val.extend(it.by_ref().take(n_val));
        ds.test.extend(it);
        ds.users.push(UserHistory { user_id, items: hist.into_iter().map(|(_, i)| i).collect(), ts });
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sidgen::ContentVector;
    use crate::synthdata::{generate, WorldConfig};

    #[test]
    fn generate_save_load_round_trip() {
        let cfg = WorldConfig {
            n_clusters: 5,
            items_per_cluster: 4,
            content_dim: 3,
            n_users: 7,
            seq_len: 30,
            distal_window: (0, 3),
            impressions_per_user: 5,
            seed: 12,
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_jsonl(&ds, dir.path()).unwrap();
        let back = load_jsonl(dir.path(), None).unwrap();
        assert_eq!(back, ds);

        let dir2 = tempfile::tempdir().unwrap();
        save_jsonl(&back, dir2.path()).unwrap();
        for f in [ITEMS_FILE, INTERACTIONS_FILE, META_FILE] {
            assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(dir2.path().join(f)).unwrap());
        }
    }

    #[test]
    fn leave_last_out_single_user() {
        let dir = tempfile::tempdir().unwrap();
        let items: Vec<ContentVector> =
            (0..4).map(|i| ContentVector { item_id: i, z: vec![i as f32], category: 0 }).collect();
        write_content_jsonl(&dir.path().join(ITEMS_FILE), &items).unwrap();
        let lines = [
            r#"{"user_id":9,"item_id":0,"ts":1,"label":null}"#,
            r#"{"user_id":9,"item_id":3,"ts":7,"label":0}"#,
            r#"{"user_id":9,"item_id":1,"ts":5,"label":1}"#,
            r#"{"user_id":9,"item_id":2,"ts":6,"label":1}"#,
        ];
        std::fs::write(dir.path().join(INTERACTIONS_FILE), lines.join("\n")).unwrap();
        let ds = load_jsonl(dir.path(), Some(SplitConfig { val_per_user: 1, test_per_user: 1 })).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (1, 1, 1));
        assert_eq!(ds.train[0].target_item, 1);
        assert_eq!(ds.val[0].target_item, 2);
        assert_eq!(ds.test[0].target_item, 3);
        assert!(ds.test.iter().all(|e| e.history_len == 1));
    }

    #[test]
    fn empty_and_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        write_content_jsonl(
            &dir.path().join(ITEMS_FILE),
            &[ContentVector { item_id: 0, z: vec![1.0], category: 0 }],
        )
        .unwrap();
        std::fs::write(dir.path().join(INTERACTIONS_FILE), "").unwrap();
        assert!(matches!(load_jsonl(dir.path(), None), Err(Error::Empty(_))));

        std::fs::write(
            dir.path().join(INTERACTIONS_FILE),
            "{\"user_id\":1,\"item_id\":0,\"ts\":1,\"label\":null}\n{\"user_id\":1,\"item_id\"\n",
        )
        .unwrap();
        match load_jsonl(dir.path(), None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        std::fs::write(dir.path().join(ITEMS_FILE), "").unwrap();
        assert!(load_jsonl(dir.path(), None).is_err());
    }
}
