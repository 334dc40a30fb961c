use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use uxsid_core::model::{load_checkpoint, save_checkpoint, ItemFeatures, Model, ModelConfig};
use uxsid_core::serving::bench::{bench_latency, LATENCY_HEADER};
use uxsid_core::serving::{default_sid_plan, load_store, parity_check, precompute, sample_pairs, save_store, EmbeddingStore};
use uxsid_core::sidgen::{
    encode_items, read_content_jsonl, read_sids_jsonl, train_codebooks, write_sids_jsonl, Codebook, CodebookConfig,
    KMeansConfig,
};
use uxsid_core::synthdata::{generate, load_jsonl, save_jsonl, Dataset, WorldConfig};
use uxsid_core::trainer::{evaluate, train_with, write_log_csv, TrainConfig};

use crate::manifest::RunManifest;
use crate::{
    BenchLatency, Command, CompareBaselines, Encode, Evaluate, GenData, Parity, Precompute, Refresh, Split, Train,
    TrainCodebook,
};

/// An input path that does not exist.
#[derive(Debug)]
struct MissingInput(PathBuf);

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "missing input: {}", self.0.display())
    }
}

impl std::error::Error for MissingInput {}

fn need(path: &Path) -> Result<&Path> {
    if !path.exists() {
        return Err(MissingInput(path.to_path_buf()).into());
    }
    Ok(path)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<MissingInput>() {
            return 3;
        }
        let io = cause.downcast_ref::<std::io::Error>().or(match cause.downcast_ref::<uxsid_core::Error>() {
            Some(uxsid_core::Error::Io(io)) => Some(io),
            _ => None,
        });
        if io.is_some_and(|io| io.kind() == std::io::ErrorKind::NotFound) {
            return 3;
        }
    }
    1
}

/// Prints the error as one JSON line on stderr.
pub fn report(e: &anyhow::Error) -> ExitCode {
    let code = exit_code(e);
    let msg = format!("{e:#}").replace('\n', " ");
    eprintln!("{}", json!({ "error": msg, "exit_code": code }));
    ExitCode::from(code)
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(need(p)?)?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn load_data(dir: &Path) -> Result<Dataset> {
    load_jsonl(need(dir)?, None).with_context(|| format!("loading {}", dir.display()))
}

/// Model and training settings read from `--config`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::TrainCodebook(a) => train_codebook(a),
        Command::Encode(a) => encode(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Precompute(a) => precompute_cmd(a),
        Command::Parity(a) => parity(a),
        Command::BenchLatency(a) => bench(a),
        Command::CompareBaselines(a) => compare(a),
        Command::Refresh(a) => refresh(a),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let mut world: WorldConfig = read_json(a.config.as_deref())?;
    world.seed = a.seed.seed;
    let mut m = RunManifest::start("gen-data", &world, Some(a.seed.seed))?;
    if let Some(c) = &a.config {
        m.input(c)?;
    }
    let ds = generate(&world)?;
    save_jsonl(&ds, &a.out)?;
    m.output(&a.out);
    m.finish(&a.out)?;
    print_json(&json!({
        "items": ds.items.len(),
        "users": ds.users.len(),
        "train": ds.train.len(),
        "val": ds.val.len(),
        "test": ds.test.len(),
        "bayes_auc": ds.meta.bayes_auc,
    }))
}

fn train_codebook(a: TrainCodebook) -> Result<()> {
    let cfg = CodebookConfig {
        levels: a.levels,
        codewords: a.codewords,
        kmeans: KMeansConfig { max_iter: a.max_iter, seed: a.seed.seed, ..Default::default() },
    };
    let mut m = RunManifest::start("train-codebook", cfg, Some(a.seed.seed))?;
    m.input(need(&a.input)?)?;
    let items = read_content_jsonl(&a.input)?;
    let cb = train_codebooks(&items, &cfg)?;
    write_atomic(&a.out, &cb.to_bytes())?;
    m.output(&a.out);
    m.finish(&a.out)?;
    print_json(&json!({ "levels": cb.num_levels(), "codewords": cb.codewords_per_level(), "inertia": cb.inertia() }))
}

fn encode(a: Encode) -> Result<()> {
    let mut m = RunManifest::start("encode", json!({}), None)?;
    m.input(need(&a.codebook)?)?;
    m.input(need(&a.input)?)?;
    let cb = Codebook::read_from(&mut std::io::BufReader::new(File::open(&a.codebook)?))?;
    let items = read_content_jsonl(&a.input)?;
    let sids = encode_items(&cb, &items)?;
    let tmp = a.out.with_extension("tmp");
    write_sids_jsonl(&tmp, &sids)?;
    std::fs::rename(&tmp, &a.out)?;
    m.output(&a.out);
    m.finish(&a.out)?;
    let first: std::collections::BTreeSet<u32> = sids.iter().filter_map(|s| s.codes.first().copied()).collect();
    print_json(&json!({ "items": sids.len(), "first_layer_sids_used": first.len() }))
}

fn features(data: &Path, sids: Option<&Path>, ds: &Dataset) -> Result<(ItemFeatures, PathBuf)> {
    let path = sids.map_or_else(|| data.join("sids.jsonl"), Path::to_path_buf);
    let sids = read_sids_jsonl(need(&path)?)?;
    Ok((ItemFeatures::from_parts(&ds.items, &sids)?, path))
}

fn train(a: Train) -> Result<()> {
    let mut cfg: RunConfig = read_json(a.config.as_deref())?;
    cfg.train.seed = a.seed.seed;
    let ds = load_data(&a.data)?;
    let (feats, sids_path) = features(&a.data, a.sids.as_deref(), &ds)?;
    let mut m = RunManifest::start("train", &cfg, Some(a.seed.seed))?;
    m.input(&a.data)?;
    m.input(&sids_path)?;
    if let Some(c) = &a.config {
        m.input(c)?;
    }
    let model = Model::new(cfg.model.sized_for(&feats, ds.user_vocab(), 0), feats, a.seed.seed)?;
    eprintln!("{} parameters, strategy {}", model.params().num_scalars(), model.strategy());
    let outcome = train_with(model, &ds, &cfg.train, |e| eprintln!("{}", e.csv_row()));
    let outcome = match outcome {
        Ok(o) => o,
        Err(f) => {
            let keep = a.out.with_extension("last-finite");
            save_checkpoint(&f.model, &keep)?;
            return Err(anyhow!(f.error).context(format!("last finite parameters saved to {}", keep.display())));
        }
    };
    save_checkpoint(&outcome.model, &a.out)?;
    let log_path = PathBuf::from(format!("{}.log.csv", a.out.display()));
    let mut w = BufWriter::new(File::create(&log_path)?);
    write_log_csv(&outcome.log, &mut w)?;
    w.flush()?;
    m.output(&a.out);
    m.output(&log_path);
    m.finish(&a.out)?;
    let best = &outcome.log[outcome.best_epoch - 1];
    print_json(&json!({
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.log.len(),
        "skipped_steps": outcome.skipped_steps,
        "val_auc": best.val_auc,
        "val_uauc": best.val_uauc,
        "val_wuauc": best.val_wuauc,
    }))
}

fn evaluate_cmd(a: Evaluate) -> Result<()> {
    let model = load_checkpoint(need(&a.model)?)?;
    let ds = load_data(&a.data)?;
    let split = match a.split {
        Split::Val => &ds.val,
        Split::Test => &ds.test,
    };
    let r = evaluate(&model, &ds, split, a.k)?;
    print_json(&json!({
        "split": a.split,
        "strategy": model.strategy(),
        "n": r.n,
        "auc": r.auc,
        "uauc": r.uauc,
        "wuauc": r.wuauc,
        "k": r.k,
        "int_r": r.int_r,
        "int_r_pos": r.int_r_pos,
        "int_r_neg": r.int_r_neg,
    }))
}

fn build_store(model: &Path, data: &Path, m: &mut RunManifest) -> Result<(EmbeddingStore, usize)> {
    m.input(need(model)?)?;
    m.input(need(data)?)?;
    let model = load_checkpoint(model)?;
    let ds = load_data(data)?;
    let plan = default_sid_plan(&model, &ds)?;
    Ok((precompute(&model, &ds, &plan, true)?, plan.len()))
}

fn store_summary(store: &EmbeddingStore, users: usize) -> serde_json::Value {
    json!({
        "entries": store.len(),
        "users": users,
        "mean_sids_per_user": store.len() as f64 / users.max(1) as f64,
        "collisions": store.collisions(),
        "d": store.d(),
    })
}

fn precompute_cmd(a: Precompute) -> Result<()> {
    let mut m = RunManifest::start("precompute", json!({}), None)?;
    let (store, users) = build_store(&a.model, &a.data, &mut m)?;
    save_store(&store, &a.out)?;
    m.output(&a.out);
    m.finish(&a.out)?;
    print_json(&store_summary(&store, users))
}

fn refresh(a: Refresh) -> Result<()> {
    let mut m = RunManifest::start("refresh", json!({}), None)?;
    let replaced = a.store.exists();
    let (store, users) = build_store(&a.model, &a.data, &mut m)?;
    save_store(&store, &a.store)?;
    m.output(&a.store);
    m.finish(&a.store)?;
    let mut v = store_summary(&store, users);
    v["replaced"] = json!(replaced);
    print_json(&v)
}

fn parity(a: Parity) -> Result<()> {
    let store = load_store(need(&a.store)?)?;
    let model = load_checkpoint(need(&a.model)?)?;
    let ds = load_data(&a.data)?;
    let plan = default_sid_plan(&model, &ds)?;
    let sample = sample_pairs(&plan, a.sample, a.seed.seed);
    let r = parity_check(&store, &model, &ds, &sample)?;
    print_json(&r)?;
    if !r.passed {
        bail!("parity check failed: max deviation {:e}, {} misses", r.max_abs_deviation, r.misses);
    }
    Ok(())
}

fn bench(a: BenchLatency) -> Result<()> {
    let model = load_checkpoint(need(&a.model)?)?;
    let rows = bench_latency(&model, &a.lengths, a.impressions, a.seed.seed)?;
    let mut csv = format!("{LATENCY_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    match &a.out {
        Some(out) => {
            let mut m = RunManifest::start("bench-latency", json!({ "lengths": a.lengths, "impressions": a.impressions }), Some(a.seed.seed))?;
            m.input(&a.model)?;
            write_atomic(out, csv.as_bytes())?;
            m.output(out);
            m.finish(out)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

pub const CURVES_HEADER: &str = "length,model,auc,uauc,wuauc,int_r_at_50";

fn compare(a: CompareBaselines) -> Result<()> {
    let mut cfg: RunConfig = read_json(a.config.as_deref())?;
    cfg.train.seed = a.seed.seed;
    let ds = load_data(&a.data)?;
    let (feats, sids_path) = features(&a.data, a.sids.as_deref(), &ds)?;
    let mut m = RunManifest::start(
        "compare-baselines",
        json!({ "run": &cfg, "lengths": a.lengths, "strategies": a.strategies }),
        Some(a.seed.seed),
    )?;
    m.input(&a.data)?;
    m.input(&sids_path)?;

    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    let mut csv = format!("{CURVES_HEADER}\n");
    for &len in &a.lengths {
        let cut = ds.truncated(len);
        for s in &a.strategies {
            let mc = ModelConfig { strategy: s.clone(), ..cfg.model.clone() }.sized_for(&feats, cut.user_vocab(), 0);
            let model = Model::new(mc, feats.clone(), a.seed.seed)?;
            let out = train_with(model, &cut, &cfg.train, |_| {}).map_err(|f| f.error)?;
            let r = evaluate(&out.model, &cut, &cut.test, cfg.train.int_r_k)?;
            eprintln!("length {len} {s}: auc {}", opt(r.auc));
            csv.push_str(&format!("{len},{s},{},{},{},{}\n", opt(r.auc), opt(r.uauc), opt(r.wuauc), opt(r.int_r)));
        }
    }
    write_atomic(&a.out, csv.as_bytes())?;
    m.output(&a.out);
    m.finish(&a.out)?;
    Ok(())
}
