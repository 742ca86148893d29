//! Versioned binary container shared by datasets, auxiliary models, chain
//! stores and checkpoints.
//!
//! ```text
//! "NCRF" | u32 format version | u64 header length | JSON header | payload
//! ```
//!
//! All integers are little-endian. The header is a JSON object carrying at
//! least `kind`, `payload_len` and `checksum` (`sha256:<hex>` over the
//! payload); everything else is kind-specific.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NCRF";
pub const FORMAT_VERSION: u32 = 1;

pub fn checksum(payload: &[u8]) -> String {
    let digest = Sha256::digest(payload);
    let mut s = String::with_capacity(7 + 64);
    s.push_str("sha256:");
    for b in digest.iter() {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn encode(kind: &str, header: Map<String, Value>, payload: &[u8]) -> Vec<u8> {
    let mut header = header;
    header.insert("kind".into(), Value::from(kind));
    header.insert("payload_len".into(), Value::from(payload.len() as u64));
    header.insert("checksum".into(), Value::from(checksum(payload)));
    let json = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}

pub fn decode(bytes: &[u8], kind: &str) -> Result<(Map<String, Value>, Vec<u8>)> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing NCRF magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(Error::Format("truncated header".into()));
    }
    let header: Value = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
    let Value::Object(header) = header else {
        return Err(Error::Format("header is not a JSON object".into()));
    };
    let found_kind = header.get("kind").and_then(Value::as_str).unwrap_or("");
    if found_kind != kind {
        return Err(Error::Format(format!(
            "expected a {kind} file, found {found_kind:?}"
        )));
    }
    let payload = &body[hlen..];
    let declared = header
        .get("payload_len")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Format("header lacks payload_len".into()))?;
    if declared as usize != payload.len() {
        return Err(Error::Format(format!(
            "payload is {} bytes, header declares {declared}",
            payload.len()
        )));
    }
    let expected = header
        .get("checksum")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Format("header lacks checksum".into()))?
        .to_string();
    let found = checksum(payload);
    if found != expected {
        return Err(Error::Checksum { expected, found });
    }
    Ok((header, payload.to_vec()))
}

/// Writes atomically: the file only appears once fully written.
pub fn write_file(
    path: &Path,
    kind: &str,
    header: Map<String, Value>,
    payload: &[u8],
) -> Result<()> {
    let bytes = encode(kind, header, payload);
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_file(path: &Path, kind: &str) -> Result<(Map<String, Value>, Vec<u8>)> {
    decode(&fs::read(path)?, kind)
}

pub(crate) fn header_field<T: serde::de::DeserializeOwned>(
    header: &Map<String, Value>,
    key: &str,
) -> Result<T> {
    let v = header
        .get(key)
        .ok_or_else(|| Error::Format(format!("header lacks {key}")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("bad {key}: {e}")))
}

#[derive(Debug, Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) -> &mut Self {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug)]
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("payload truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing payload bytes",
                self.remaining()
            )));
        }
        Ok(())
    }
}
