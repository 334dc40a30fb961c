use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
struct InputDigest {
    path: PathBuf,
    sha256: String,
}

/// What a run read, wrote and took, saved beside its output.
#[derive(Serialize)]
pub struct RunManifest {
    subcommand: &'static str,
    config: serde_json::Value,
    seed: Option<u64>,
    build: String,
    inputs: Vec<InputDigest>,
    outputs: Vec<PathBuf>,
    wall_ms: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

impl RunManifest {
    pub fn start(subcommand: &'static str, config: impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            subcommand,
            config: serde_json::to_value(config)?,
            seed,
            build: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_ms: 0.0,
            started: Some(Instant::now()),
        })
    }

    /// Records a file, or every regular file of a directory in name order.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        if path.is_dir() {
            let mut files: Vec<PathBuf> =
                std::fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
            files.sort();
            for f in files {
                self.input(&f)?;
            }
            return Ok(());
        }
        self.inputs.push(InputDigest { path: path.to_path_buf(), sha256: sha256_file(path)? });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `<primary>.manifest.json` through a temporary file.
    pub fn finish(mut self, primary: &Path) -> Result<PathBuf> {
        self.wall_ms = self.started.map_or(0.0, |t| t.elapsed().as_secs_f64() * 1e3);
        let path = manifest_path(primary);
        let tmp = path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            serde_json::to_writer_pretty(&mut f, &self)?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    let s = primary.as_os_str().to_string_lossy();
    PathBuf::from(format!("{}.manifest.json", s.trim_end_matches('/')))
}
