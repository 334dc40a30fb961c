//! Model checkpoint file.
//!
//! ```text
//! "UXMD" | version u16 | header_len u32 | header JSON (config + item features)
//! n_params u32 | per param: name_len u16, name, rows u32, cols u32, f32 LE data
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ItemFeatures, Model, ModelConfig};
use crate::binio::{expect_eof, read_exact, read_f32s, read_u16, read_u32};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore, Real};

const MAGIC: &[u8; 4] = b"UXMD";
const VERSION: u16 = 1;
const WHAT: &str = "checkpoint";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    features: ItemFeatures,
}

pub fn write_checkpoint<T: Real>(model: &Model<T>, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&Header { config: model.cfg.clone(), features: model.features.clone() })?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for p in model.params.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.value.rows() as u32).to_le_bytes())?;
        w.write_all(&(p.value.cols() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(p.value.data().len() * 4);
        for &x in p.value.data() {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads a checkpoint; every parameter of the configured architecture must
/// be present with a matching shape, and nothing else.
pub fn read_checkpoint(r: &mut impl Read) -> Result<Model<f32>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, WHAT)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = read_u16(r, WHAT)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut header = vec![0u8; read_u32(r, WHAT)? as usize];
    read_exact(r, &mut header, WHAT)?;
    let header: Header = serde_json::from_slice(&header)?;

    let n = read_u32(r, WHAT)? as usize;
    let mut stored = ParamStore::<f32>::new();
    for _ in 0..n {
        let mut name = vec![0u8; read_u16(r, WHAT)? as usize];
        read_exact(r, &mut name, WHAT)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rows = read_u32(r, WHAT)? as usize;
        let cols = read_u32(r, WHAT)? as usize;
        let data = read_f32s(r, rows * cols, WHAT)?;
        if stored.id(&name).is_some() {
            return Err(Error::Format(format!("duplicate parameter {name}")));
        }
        stored.add(name, Matrix::from_vec(rows, cols, data)?);
    }
    expect_eof(r, WHAT)?;

    let mut model = Model::<f32>::new(header.config, header.features, 0)?;
    if stored.len() != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, architecture needs {}",
            stored.len(),
            model.params.len()
        )));
    }
    model.params.copy_values_from(&stored)?;
    Ok(model)
}

/// Writes through a temporary file and renames it into place.
pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_checkpoint(model, &mut w)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
