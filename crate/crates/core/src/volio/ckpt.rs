//! MCKP: self-describing checkpoint container.
//!
//! ```text
//! "MCKP1\n"
//! u32 n_meta   [u32 klen, key, u32 vlen, value]*
//! u32 n_params [u32 nlen, name, u32 rank, u32 dims[rank], f32 data]*
//! ```
//!
//! All integers and floats little-endian. Entry order is preserved, so
//! identical checkpoints serialize to identical bytes.

use std::fs;
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: Vec<(String, ParamArray)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        if let Some(slot) = self.meta.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value.into();
        } else {
            self.meta.push((key.to_string(), value.into()));
        }
    }

    pub fn param(&self, name: &str) -> Option<&ParamArray> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
    }
}

const MAGIC: &[u8] = b"MCKP1\n";

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for (name, _) in &ckpt.params {
        if !seen.insert(name.as_str()) {
            return Err(Error::Invariant(format!("duplicate parameter name {name}")));
        }
    }
    for (name, p) in &ckpt.params {
        let n: usize = p.shape.iter().product();
        if n != p.data.len() {
            return Err(Error::Invariant(format!(
                "parameter {name}: shape {:?} does not match data length {}",
                p.shape,
                p.data.len()
            )));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, ckpt.meta.len());
    for (k, v) in &ckpt.meta {
        push_str(&mut out, k);
        push_str(&mut out, v);
    }
    push_u32(&mut out, ckpt.params.len());
    for (name, p) in &ckpt.params {
        push_str(&mut out, name);
        push_u32(&mut out, p.shape.len());
        for d in &p.shape {
            push_u32(&mut out, *d);
        }
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    // Write-then-rename so an interrupted run never leaves a torn
    // checkpoint behind at the resume path.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let err = |msg: &str| Error::parse(path, msg);
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(err("bad magic"));
    }
    let mut pos = MAGIC.len();

    let n_meta = take_u32(&bytes, &mut pos).ok_or_else(|| err("truncated meta count"))?;
    let mut meta = Vec::with_capacity(n_meta);
    for _ in 0..n_meta {
        let k = take_str(&bytes, &mut pos).ok_or_else(|| err("truncated meta key"))?;
        let v = take_str(&bytes, &mut pos).ok_or_else(|| err("truncated meta value"))?;
        meta.push((k, v));
    }

    let n_params = take_u32(&bytes, &mut pos).ok_or_else(|| err("truncated param count"))?;
    let mut params = Vec::with_capacity(n_params);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..n_params {
        let name = take_str(&bytes, &mut pos).ok_or_else(|| err("truncated param name"))?;
        if !seen.insert(name.clone()) {
            return Err(Error::parse(path, format!("duplicate parameter name {name}")));
        }
        let rank = take_u32(&bytes, &mut pos).ok_or_else(|| err("truncated rank"))?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&bytes, &mut pos).ok_or_else(|| err("truncated dims"))?);
        }
        let n: usize = shape.iter().product();
        if bytes.len() < pos + n * 4 {
            return Err(Error::parse(path, format!("truncated data for {name}")));
        }
        let mut data = Vec::with_capacity(n);
        for c in bytes[pos..pos + n * 4].chunks_exact(4) {
            data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        }
        pos += n * 4;
        params.push((name, ParamArray { shape, data }));
    }
    if pos != bytes.len() {
        return Err(err("trailing bytes after last parameter"));
    }
    Ok(Checkpoint { meta, params })
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits u32").to_le_bytes());
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    push_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn take_u32(bytes: &[u8], pos: &mut usize) -> Option<usize> {
    let c = bytes.get(*pos..*pos + 4)?;
    *pos += 4;
    Some(u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
}

fn take_str(bytes: &[u8], pos: &mut usize) -> Option<String> {
    let len = take_u32(bytes, pos)?;
    let s = bytes.get(*pos..*pos + len)?;
    *pos += len;
    String::from_utf8(s.to_vec()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("hetseg-{}-{name}", std::process::id()))
    }

    #[test]
    fn empty_checkpoint_roundtrips() {
        let path = tmp("empty.mckp");
        write_checkpoint(&Checkpoint::default(), &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(back, Checkpoint::default());
    }

    #[test]
    fn identity_matrix_roundtrips_exactly() {
        let ckpt = Checkpoint {
            meta: vec![("step".into(), "0".into())],
            params: vec![(
                "w".into(),
                ParamArray {
                    shape: vec![2, 2],
                    data: vec![1.0, 0.0, 0.0, 1.0],
                },
            )],
        };
        let path = tmp("eye.mckp");
        write_checkpoint(&ckpt, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn duplicate_parameter_names_are_refused() {
        let p = ParamArray {
            shape: vec![1],
            data: vec![0.0],
        };
        let ckpt = Checkpoint {
            meta: vec![],
            params: vec![("w".into(), p.clone()), ("w".into(), p)],
        };
        assert!(write_checkpoint(&ckpt, &tmp("dup.mckp")).is_err());
    }

    #[test]
    fn corrupt_container_is_a_parse_error() {
        let path = tmp("corrupt.mckp");
        let ckpt = Checkpoint {
            meta: vec![],
            params: vec![(
                "w".into(),
                ParamArray {
                    shape: vec![3],
                    data: vec![1.0, 2.0, 3.0],
                },
            )],
        };
        write_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&path, &bytes).unwrap();
        let e = read_checkpoint(&path).unwrap_err();
        std::fs::remove_file(&path).ok();
        assert!(e.to_string().contains("truncated"), "{e}");
    }

    #[test]
    fn serialization_is_deterministic() {
        let ckpt = Checkpoint {
            meta: vec![("a".into(), "1".into()), ("b".into(), "2".into())],
            params: vec![(
                "w".into(),
                ParamArray {
                    shape: vec![2],
                    data: vec![0.5, -0.5],
                },
            )],
        };
        let p1 = tmp("det1.mckp");
        let p2 = tmp("det2.mckp");
        write_checkpoint(&ckpt, &p1).unwrap();
        write_checkpoint(&ckpt, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        std::fs::remove_file(&p1).ok();
        std::fs::remove_file(&p2).ok();
        assert_eq!(b1, b2);
    }
}
