//! File formats: 16-bit PGM images, JSON documents, CSV tables and flat
//! binary tensor blobs with a JSON header.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Tensor;

/// Writes `bytes` to a sibling temp file and renames it into place, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Encodes `[H, W]` values in `[0, 1]` as binary PGM (P5), big-endian
/// 16-bit samples with the given `maxval`. Values are rounded to the
/// nearest code and clipped.
pub fn encode_pgm(img: &Tensor, maxval: u16) -> Result<Vec<u8>> {
    let (h, w) = img.hw()?;
    if maxval < 256 {
        return Err(Error::InvalidArgument(format!("16-bit PGM needs maxval >= 256, got {maxval}")));
    }
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    out.reserve(2 * h * w);
    let m = maxval as f64;
    for &v in img.data() {
        let code = (v * m).round().clamp(0.0, m) as u16;
        out.extend_from_slice(&code.to_be_bytes());
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, img: &Tensor, maxval: u16) -> Result<()> {
    write_atomic(path, &encode_pgm(img, maxval)?)
}

/// Decodes a 16-bit binary PGM into values `code / maxval`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Serde(format!("malformed PGM: {m}"));
    let mut fields = Vec::with_capacity(4);
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
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary graymap"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval < 256 || maxval > 65535 {
        return Err(bad("only 16-bit samples are supported"));
    }
    let body = bytes.get(pos..pos + 2 * w * h).ok_or_else(|| bad("truncated pixel data"))?;
    let m = maxval as f64;
    let data = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / m).collect();
    Tensor::new(vec![h, w], data)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

/// Serializes rows to CSV text with a header row.
pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, csv_string(rows)?.as_bytes())
}

/// Header of a tensor blob: names and shapes in storage order, plus
/// free-form metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobHeader {
    pub tensors: Vec<BlobEntry>,
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Writes `<stem>.json` (header) and `<stem>.bin` (little-endian f64
/// values, tensors concatenated in header order).
pub fn save_tensors(stem: &Path, meta: serde_json::Value, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let header = BlobHeader {
        tensors: tensors
            .iter()
            .map(|(n, t)| BlobEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let mut bin = Vec::new();
    for (_, t) in tensors {
        for v in t.data() {
            bin.write_all(&v.to_le_bytes()).expect("writing to a Vec cannot fail");
        }
    }
    write_atomic(&stem.with_extension("bin"), &bin)?;
    write_json(&stem.with_extension("json"), &header)
}

/// Reads a blob written by [`save_tensors`].
pub fn load_tensors(stem: &Path) -> Result<(BlobHeader, Vec<Tensor>)> {
    let header: BlobHeader = read_json(&stem.with_extension("json"))?;
    let bin_path = stem.with_extension("bin");
    let bin = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bin.len() != 8 * total {
        return Err(Error::Serde(format!(
            "{} holds {} bytes, header describes {}",
            bin_path.display(),
            bin.len(),
            8 * total
        )));
    }
    let mut values = bin.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        out.push(Tensor::new(e.shape.clone(), values.by_ref().take(n).collect())?);
    }
    Ok((header, out))
}
