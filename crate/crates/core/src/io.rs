//! File formats: flat `key = value` configs, the weights container and
//! 8-bit PGM attention maps.
//!
//! Weights layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "DNLLABW1"
//! meta_len  u32      followed by meta_len bytes of flat-config UTF-8 text
//! count     u32      number of tensors
//! per tensor: name_len u32, name bytes, rank u32, rank × u64 dims
//! payload   every tensor's values as f64, row-major, in table order
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"DNLLABW1";

/// Parses `key = value` lines. Blank lines and `#` comments are skipped; a
/// repeated key keeps its last value.
pub fn parse_flat_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            what: "config",
            detail: format!("line {}: expected `key = value`", n + 1),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Format {
                what: "config",
                detail: format!("line {}: empty key", n + 1),
            });
        }
        match out.iter_mut().find(|(key, _)| key == k) {
            Some(slot) => slot.1 = v.to_string(),
            None => out.push((k.to_string(), v.to_string())),
        }
    }
    Ok(out)
}

pub fn read_flat_config(path: &Path) -> Result<Vec<(String, String)>> {
    parse_flat_config(&fs::read_to_string(path)?)
}

pub fn render_flat_config(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightsFile {
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format {
        what: "weights",
        detail: format!("{v} does not fit a u32 field"),
    })?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format {
                what: "weights",
                detail: format!("truncated at byte {}", self.pos),
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format {
            what: "weights",
            detail: e.to_string(),
        })
    }
}

impl WeightsFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = WEIGHTS_MAGIC.to_vec();
        let meta = render_flat_config(&self.metadata);
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != WEIGHTS_MAGIC {
            return Err(Error::Format {
                what: "weights",
                detail: "bad magic".into(),
            });
        }
        let metadata = parse_flat_config(&r.string()?)?;
        let count = r.u32()?;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            table.push((name, dims));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, dims) in table {
            let n: usize = dims.iter().product();
            let bytes = r.take(n.checked_mul(8).ok_or_else(|| Error::Format {
                what: "weights",
                detail: format!("tensor {name} too large"),
            })?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(dims, data)?));
        }
        if r.pos != buf.len() {
            return Err(Error::Format {
                what: "weights",
                detail: format!("{} trailing bytes", buf.len() - r.pos),
            });
        }
        Ok(WeightsFile { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Min-max normalises `values` to bytes. A constant map becomes mid-gray.
pub fn encode_pgm(values: &[f64], width: usize, height: usize) -> Result<(Vec<u8>, f64, f64)> {
    if values.len() != width * height || values.is_empty() {
        return Err(Error::shape("pgm", &[height, width], &[values.len()]));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let span = max - min;
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            (255.0 * (v - min) / span).round() as u8
        } else {
            128
        }
    }));
    Ok((out, min, max))
}

pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("range.txt")
}

/// Writes a PGM and its `(min, max)` sidecar.
pub fn write_pgm(path: &Path, values: &[f64], width: usize, height: usize) -> Result<(f64, f64)> {
    let (bytes, min, max) = encode_pgm(values, width, height)?;
    fs::write(path, bytes)?;
    fs::write(
        sidecar_path(path),
        format!("min = {min:e}\nmax = {max:e}\n"),
    )?;
    Ok((min, max))
}

/// Parses a binary PGM back into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |d: &str| Error::Format {
        what: "pgm",
        detail: d.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let body = &bytes[pos + 1..];
    if body.len() != w * h {
        return Err(bad("pixel count mismatch"));
    }
    Ok((w, h, body.to_vec()))
}
