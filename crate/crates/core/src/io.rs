//! MDTS1 trajectory files and little-endian f64 blobs.
//!
//! Layout: magic `MDTS1`, u32 version (1), u32 n_vars, u64 n_steps, f64 dt,
//! u64 seed, then the row-major f64 payload, all little-endian. Variable names
//! and free-form metadata live in a JSON sidecar next to the file
//! (`<path>.json`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::TimeSeries;

pub const MAGIC: &[u8; 5] = b"MDTS1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 5 + 4 + 4 + 8 + 8 + 8;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub var_names: Vec<String>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_mdts(ts: &TimeSeries) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + ts.values().len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(ts.n_vars() as u32).to_le_bytes());
    buf.extend_from_slice(&(ts.n_steps() as u64).to_le_bytes());
    buf.extend_from_slice(&ts.dt().to_le_bytes());
    buf.extend_from_slice(&ts.seed().to_le_bytes());
    for v in ts.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Decode a payload; `names` overrides the default `v0, v1, ...` labels.
pub fn decode_mdts(bytes: &[u8], names: Option<Vec<String>>) -> Result<TimeSeries> {
    if bytes.len() < HEADER_LEN || &bytes[..5] != MAGIC {
        return Err(Error::Format("missing MDTS1 magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(5);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported MDTS1 version {version}")));
    }
    let n_vars = u32_at(9) as usize;
    let n_steps = u64_at(13) as usize;
    let dt = f64::from_bits(u64_at(21));
    let seed = u64_at(29);
    let expected = n_vars
        .checked_mul(n_steps)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
    if bytes.len() - HEADER_LEN != expected {
        return Err(Error::Format(format!(
            "payload has {} bytes, header implies {expected}",
            bytes.len() - HEADER_LEN
        )));
    }
    let values = f64s_from_le(&bytes[HEADER_LEN..])?;
    match names {
        Some(n) => TimeSeries::new(values, n_vars, dt, n, seed),
        None => TimeSeries::with_default_names(values, n_vars, dt, "v", seed),
    }
}

pub fn write_mdts(path: &Path, ts: &TimeSeries, meta: serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&encode_mdts(ts))?;
    f.flush()?;
    let side = Sidecar {
        format: "MDTS1".into(),
        var_names: ts.var_names().to_vec(),
        meta,
    };
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&side)?)?;
    Ok(())
}

/// Read a trajectory and its sidecar (if present).
pub fn read_mdts(path: &Path) -> Result<(TimeSeries, Option<Sidecar>)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let side_path = sidecar_path(path);
    let side: Option<Sidecar> = if side_path.exists() {
        Some(serde_json::from_slice(&std::fs::read(side_path)?)?)
    } else {
        None
    };
    let ts = decode_mdts(&bytes, side.as_ref().map(|s| s.var_names.clone()))?;
    Ok((ts, side))
}

pub fn f64s_to_le(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn f64s_from_le(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!("{} bytes is not a whole number of f64", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_f64_bin(path: &Path, v: &[f64]) -> Result<()> {
    std::fs::write(path, f64s_to_le(v))?;
    Ok(())
}

pub fn read_f64_bin(path: &Path, expected_len: usize) -> Result<Vec<f64>> {
    let v = f64s_from_le(&std::fs::read(path)?)?;
    if v.len() != expected_len {
        return Err(Error::Format(format!(
            "{} holds {} values, expected {expected_len}",
            path.display(),
            v.len()
        )));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mdts");
        let ts = TimeSeries::new(vec![1.0, -2.5, 3.25, 1e-300], 2, 0.01, vec!["x".into(), "y".into()], 42).unwrap();
        write_mdts(&p, &ts, serde_json::json!({"system": "langevin"})).unwrap();
        let (back, side) = read_mdts(&p).unwrap();
        assert_eq!(back, ts);
        assert_eq!(side.unwrap().meta["system"], "langevin");
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..5], b"MDTS1");
        assert_eq!(bytes.len(), HEADER_LEN + 32);
    }

    #[test]
    fn rejects_truncated() {
        let ts = TimeSeries::with_default_names(vec![1.0, 2.0], 1, 0.5, "x", 1).unwrap();
        let b = encode_mdts(&ts);
        assert!(decode_mdts(&b[..b.len() - 1], None).is_err());
        assert!(decode_mdts(b"MDTS2", None).is_err());
    }
}
