//! Store file: `UXES`, u16 version, u32 d, u64 parameter checksum, u64
//! record count, records of (u64 key, 2d f32), then u64 collided-entry
//! count and entries of (u64 key, u64 uid, u32 sid, 2d f32). Little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{CacheKey, Collided, EmbeddingStore};
use crate::binio::{expect_eof, read_array, read_f32s, read_u16, read_u32, read_u64};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"UXES";
const VERSION: u16 = 1;
const WHAT: &str = "embedding store";

fn write_f32s(w: &mut impl Write, v: &[f32]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_store(store: &EmbeddingStore, w: &mut impl Write) -> Result<()> {
    if !store.is_frozen() {
        return Err(Error::Store("only a frozen store can be saved".into()));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.d() as u32).to_le_bytes())?;
    w.write_all(&store.params_checksum().to_le_bytes())?;
    w.write_all(&(store.keys.len() as u64).to_le_bytes())?;
    for (k, v) in store.records() {
        w.write_all(&k.0.to_le_bytes())?;
        write_f32s(w, v)?;
    }
    let collided = store.collided_entries();
    w.write_all(&(collided.len() as u64).to_le_bytes())?;
    for (k, c) in collided {
        w.write_all(&k.0.to_le_bytes())?;
        w.write_all(&c.uid.to_le_bytes())?;
        w.write_all(&c.sid.to_le_bytes())?;
        write_f32s(w, &c.value)?;
    }
    Ok(())
}

/// Reads a whole store; any defect fails the read rather than yielding a
/// partial store.
pub fn read_store(r: &mut impl Read) -> Result<EmbeddingStore> {
    if &read_array::<4>(r, WHAT)? != MAGIC {
        return Err(Error::Format("not an embedding store (bad magic)".into()));
    }
    let version = read_u16(r, WHAT)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported store version {version}")));
    }
    let d = read_u32(r, WHAT)? as usize;
    if d == 0 {
        return Err(Error::Format("store with d = 0".into()));
    }
    let mut store = EmbeddingStore::new(d, read_u64(r, WHAT)?);
    let n = read_u64(r, WHAT)?;
    for _ in 0..n {
        let key = CacheKey(read_u64(r, WHAT)?);
        let value = read_f32s(r, 2 * d, WHAT)?;
        if store.index.contains_key(&key) {
            return Err(Error::Format(format!("duplicate key {:#x}", key.0)));
        }
        store.push_record(key, &value);
    }
    let n_collided = read_u64(r, WHAT)?;
    for _ in 0..n_collided {
        let key = CacheKey(read_u64(r, WHAT)?);
        let uid = read_u64(r, WHAT)?;
        let sid = read_u32(r, WHAT)?;
        let value = read_f32s(r, 2 * d, WHAT)?;
        if super::make_key(uid, sid) != key || store.index.contains_key(&key) {
            return Err(Error::Format(format!("inconsistent collided entry for user {uid} SID {sid}")));
        }
        store.push_collided(key, Collided { uid, sid, value });
    }
    expect_eof(r, WHAT)?;
    store.mark_frozen();
    Ok(store)
}

/// Writes through a temporary file and renames it into place, so readers
/// see either the old store or the new one.
pub fn save_store(store: &EmbeddingStore, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_store(store, &mut w)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<EmbeddingStore> {
    read_store(&mut BufReader::new(File::open(path)?))
}
