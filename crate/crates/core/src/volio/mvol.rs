//! MVOL: the volume container. ASCII header, then the raw payload.
//!
//! ```text
//! MVOL1
//! dims <nx> <ny> <nz>
//! dtype f32|u32
//! tasks <N>          (0 for f32 volumes; may be omitted on read)
//! end
//! <payload: nx·ny·nz little-endian words, x-fastest>
//! ```
//!
//! Serialization is canonical: the header is always exactly these five
//! lines, so identical values produce identical bytes.

use std::fs;
use std::path::Path;

use super::{used_bits, LabelField, ScalarField};
use crate::{Error, Result};

const MAGIC: &str = "MVOL1";

#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Scalar(ScalarField),
    Label(LabelField),
}

pub fn scalar_to_bytes(f: &ScalarField) -> Result<Vec<u8>> {
    // Re-validate: `data` is public and a refused write beats a bad file.
    let checked = ScalarField::new(f.dims, f.data.clone())?;
    let mut out = header(checked.dims, "f32", 0).into_bytes();
    out.reserve(checked.data.len() * 4);
    for v in &checked.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn label_to_bytes(f: &LabelField) -> Result<Vec<u8>> {
    let checked = LabelField::new(f.dims, f.data.clone(), f.n_tasks)?;
    let mut out = header(checked.dims, "u32", checked.n_tasks).into_bytes();
    out.reserve(checked.data.len() * 4);
    for v in &checked.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_scalar(f: &ScalarField, path: &Path) -> Result<()> {
    fs::write(path, scalar_to_bytes(f)?)?;
    Ok(())
}

pub fn write_label(f: &LabelField, path: &Path) -> Result<()> {
    fs::write(path, label_to_bytes(f)?)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path)?;
    volume_from_bytes(&bytes, &path.display().to_string())
}

pub fn read_scalar(path: &Path) -> Result<ScalarField> {
    match read_volume(path)? {
        Volume::Scalar(f) => Ok(f),
        Volume::Label(_) => Err(Error::parse(path, "expected dtype f32, found u32")),
    }
}

pub fn read_label(path: &Path) -> Result<LabelField> {
    match read_volume(path)? {
        Volume::Label(f) => Ok(f),
        Volume::Scalar(_) => Err(Error::parse(path, "expected dtype u32, found f32")),
    }
}

fn header(dims: (usize, usize, usize), dtype: &str, tasks: usize) -> String {
    format!(
        "{MAGIC}\ndims {} {} {}\ndtype {dtype}\ntasks {tasks}\nend\n",
        dims.0, dims.1, dims.2
    )
}

pub fn volume_from_bytes(bytes: &[u8], origin: &str) -> Result<Volume> {
    let err = |msg: String| Error::Parse {
        path: origin.to_string(),
        msg,
    };

    let mut pos = 0usize;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err("unterminated header line".into()))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| err("header is not UTF-8".into()))?;
        pos += nl + 1;
        Ok(line)
    };

    if next_line()? != MAGIC {
        return Err(err(format!("bad magic, expected {MAGIC}")));
    }

    let dims_line = next_line()?;
    let dims = parse_dims(dims_line).ok_or_else(|| err(format!("bad dims line {dims_line:?}")))?;

    let dtype_line = next_line()?;
    let dtype = dtype_line
        .strip_prefix("dtype ")
        .ok_or_else(|| err(format!("expected dtype line, found {dtype_line:?}")))?;
    match dtype {
        "f32" | "u32" => {}
        other => return Err(err(format!("unsupported dtype {other}"))),
    }

    // `tasks` is optional for f32 volumes; u32 volumes require it.
    let mut tasks: Option<usize> = None;
    let line = next_line()?;
    let end_seen = if let Some(t) = line.strip_prefix("tasks ") {
        tasks = Some(
            t.parse::<usize>()
                .map_err(|_| err(format!("bad tasks count {t:?}")))?,
        );
        false
    } else if line == "end" {
        true
    } else {
        return Err(err(format!("expected tasks or end, found {line:?}")));
    };
    if !end_seen {
        let line = next_line()?;
        if line != "end" {
            return Err(err(format!("expected end, found {line:?}")));
        }
    }

    let n = dims.0 * dims.1 * dims.2;
    let payload = &bytes[pos..];
    if payload.len() != n * 4 {
        return Err(err(format!(
            "payload is {} bytes, dims {n} voxels require {}",
            payload.len(),
            n * 4
        )));
    }

    match dtype {
        "f32" => {
            if tasks.unwrap_or(0) != 0 {
                return Err(err("f32 volume with nonzero tasks".into()));
            }
            let mut data = Vec::with_capacity(n);
            for c in payload.chunks_exact(4) {
                data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
            }
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(err(format!("non-finite value at linear index {i}")));
            }
            Ok(Volume::Scalar(ScalarField { dims, data }))
        }
        "u32" => {
            let n_tasks = tasks.ok_or_else(|| err("u32 volume missing tasks line".into()))?;
            if n_tasks == 0 || n_tasks > 32 {
                return Err(err(format!("tasks {n_tasks} outside 1..=32")));
            }
            let mut data = Vec::with_capacity(n);
            for c in payload.chunks_exact(4) {
                data.push(u32::from_le_bytes([c[0], c[1], c[2], c[3]]));
            }
            let mask = used_bits(n_tasks);
            if let Some(i) = data.iter().position(|w| w & !mask != 0) {
                return Err(err(format!(
                    "label word {:#x} at linear index {i} sets a bit >= tasks {n_tasks}",
                    data[i]
                )));
            }
            Ok(Volume::Label(LabelField {
                dims,
                data,
                n_tasks,
            }))
        }
        _ => unreachable!(),
    }
}

fn parse_dims(line: &str) -> Option<(usize, usize, usize)> {
    let rest = line.strip_prefix("dims ")?;
    let mut it = rest.split(' ');
    let nx = it.next()?.parse().ok()?;
    let ny = it.next()?.parse().ok()?;
    let nz = it.next()?.parse().ok()?;
    if it.next().is_some() || nx == 0 || ny == 0 || nz == 0 {
        return None;
    }
    Some((nx, ny, nz))
}
