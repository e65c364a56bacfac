//! On-disk formats: DTF tensors, binary PGM masks, and parameter checkpoints.
//!
//! DTF layout: the magic bytes `DTF1`, a `u8` dtype tag (0 = f64), a `u8`
//! rank, one little-endian `u32` per dimension, then the row-major
//! little-endian payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::tensor::Tensor;

const DTF_MAGIC: &[u8; 4] = b"DTF1";
const DTYPE_F64: u8 = 0;

pub fn encode_dtf(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.ndim() + 8 * t.numel());
    out.extend_from_slice(DTF_MAGIC);
    out.push(DTYPE_F64);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_dtf(bytes: &[u8]) -> Result<Tensor> {
    let bad = |detail: &str| Error::Format {
        format: "DTF",
        detail: detail.to_string(),
    };
    if bytes.len() < 6 || &bytes[..4] != DTF_MAGIC {
        return Err(bad("missing DTF1 magic"));
    }
    if bytes[4] != DTYPE_F64 {
        return Err(bad(&format!("unsupported dtype tag {}", bytes[4])));
    }
    let ndim = bytes[5] as usize;
    let header = 6 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = (0..ndim)
        .map(|i| {
            let o = 6 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
        })
        .collect();
    let numel: usize = shape.iter().product();
    if bytes.len() != header + 8 * numel {
        return Err(bad(&format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            bytes.len() - header,
            8 * numel
        )));
    }
    let data = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_dtf(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes(path, &encode_dtf(t))
}

pub fn read_dtf(path: &Path) -> Result<Tensor> {
    decode_dtf(&read_bytes(path)?)
}

/// Binary (P5, maxval 255) PGM of an 8-bit grid.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |detail: &str| Error::Format {
        format: "PGM",
        detail: detail.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a P5 file"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1;
    let pixels = bytes.get(pos..).unwrap_or_default();
    if pixels.len() != w * h {
        return Err(bad("pixel payload size mismatch"));
    }
    Ok((w, h, pixels.to_vec()))
}

pub fn write_mask_pgm(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let px: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_bytes(path, &encode_pgm(width, height, &px))
}

pub fn read_mask_pgm(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let (w, h, px) = decode_pgm(&read_bytes(path)?)?;
    Ok((w, h, px.into_iter().map(|p| p >= 128).collect()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub kind: String,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn blob_name(name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '.'
            }
        })
        .collect();
    format!("{clean}.dtf")
}

/// Writes `manifest.json` plus one DTF blob per parameter into `dir`.
///
/// Returns the paths written, manifest last.
pub fn save_checkpoint(
    dir: &Path,
    kind: &str,
    params: &ParamSet,
    meta: serde_json::Value,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(params.len());
    let mut written = Vec::with_capacity(params.len() + 1);
    for (name, t) in params.iter() {
        let file = blob_name(name);
        let path = dir.join(&file);
        write_dtf(&path, t)?;
        written.push(path);
        entries.push(ParamEntry {
            name: name.to_string(),
            file,
            shape: t.shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        params: entries,
        meta,
    };
    let path = dir.join("manifest.json");
    write_bytes(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    written.push(path);
    Ok(written)
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, ParamSet)> {
    let path = dir.join("manifest.json");
    let manifest: CheckpointManifest = serde_json::from_slice(&read_bytes(&path)?)?;
    let mut params = ParamSet::new();
    for e in &manifest.params {
        let t = read_dtf(&dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::shape("load_checkpoint", &e.shape, t.shape()));
        }
        params.push(e.name.clone(), t);
    }
    Ok((manifest, params))
}
