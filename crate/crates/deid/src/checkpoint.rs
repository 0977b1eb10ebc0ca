//! Versioned binary checkpoint format for trained parameter stores.
//!
//! Layout: magic, u32 format version, length-prefixed architecture tag, u32
//! tensor count, then per tensor a length-prefixed shape (u32 dims) followed
//! by the f64 little-endian data, in declaration order. A code-dump variant
//! serializes per-image integer grids as length-prefixed i16 arrays.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use numcore::{PTensor, ParamStore};

use crate::error::{DeidError, Result};

const MAGIC: &[u8; 8] = b"DEIDCKPT";
const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn get_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| DeidError::Corrupt("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_store(path: &Path, arch_tag: &str, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, arch_tag.len() as u32);
    buf.extend_from_slice(arch_tag.as_bytes());
    let tensors = store.tensors();
    put_u32(&mut buf, tensors.len() as u32);
    for t in tensors {
        put_u32(&mut buf, t.shape.len() as u32);
        for &d in &t.shape {
            put_u32(&mut buf, d as u32);
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Loads a checkpoint, checking the tag and that tensor shapes match the
/// freshly constructed (expected) store before overwriting its contents.
pub fn load_store(path: &Path, expect_tag: &str, store: &mut ParamStore) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| {
        DeidError::MissingPrerequisite(format!("checkpoint {}: {e}", path.display()))
    })?;
    let corrupt = |msg: String| DeidError::Corrupt(format!("{}: {msg}", path.display()));
    let mut r = Cursor::new(bytes.as_slice());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("too short".into()))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let tag_len = get_u32(&mut r)? as usize;
    let mut tag = vec![0u8; tag_len];
    r.read_exact(&mut tag).map_err(|_| corrupt("truncated tag".into()))?;
    let tag = String::from_utf8(tag).map_err(|_| corrupt("non-utf8 tag".into()))?;
    if tag != expect_tag {
        return Err(corrupt(format!("architecture tag {tag:?}, expected {expect_tag:?}")));
    }
    let n = get_u32(&mut r)? as usize;
    if n != store.tensors().len() {
        return Err(corrupt(format!("{n} tensors, expected {}", store.tensors().len())));
    }
    let mut tensors = Vec::with_capacity(n);
    for i in 0..n {
        let ndim = get_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(get_u32(&mut r)? as usize);
        }
        if shape != store.tensors()[i].shape {
            return Err(corrupt(format!(
                "tensor {i} shape {shape:?}, expected {:?}",
                store.tensors()[i].shape
            )));
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut b = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut b).map_err(|_| corrupt("truncated tensor data".into()))?;
            data.push(f64::from_le_bytes(b));
        }
        tensors.push(PTensor { data, shape });
    }
    if r.position() as usize != bytes.len() {
        return Err(corrupt("trailing bytes".into()));
    }
    store.replace_tensors(tensors);
    Ok(())
}

/// Debug dump of quantized code grids: u32 image count, then per image a u32
/// length prefix and i16 little-endian values for the code grid, followed by
/// a u32 length prefix and i16 values for the binary mask.
pub fn save_code_dump(path: &Path, entries: &[(Vec<i16>, Vec<i16>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(b"DEIDCODE");
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, entries.len() as u32);
    for (codes, mask) in entries {
        for arr in [codes, mask] {
            put_u32(&mut buf, arr.len() as u32);
            for &v in arr {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_code_dump(path: &Path) -> Result<Vec<(Vec<i16>, Vec<i16>)>> {
    let bytes = fs::read(path)?;
    let corrupt = |msg: &str| DeidError::Corrupt(format!("{}: {msg}", path.display()));
    let mut r = Cursor::new(bytes.as_slice());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("too short"))?;
    if &magic != b"DEIDCODE" {
        return Err(corrupt("bad magic"));
    }
    if get_u32(&mut r)? != VERSION {
        return Err(corrupt("unsupported version"));
    }
    let n = get_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pair = Vec::with_capacity(2);
        for _ in 0..2 {
            let len = get_u32(&mut r)? as usize;
            let mut arr = Vec::with_capacity(len);
            let mut b = [0u8; 2];
            for _ in 0..len {
                r.read_exact(&mut b).map_err(|_| corrupt("truncated array"))?;
                arr.push(i16::from_le_bytes(b));
            }
            pair.push(arr);
        }
        let mask = pair.pop().unwrap();
        let codes = pair.pop().unwrap();
        out.push((codes, mask));
    }
    Ok(out)
}
