//! Versioned binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CMPC" | version: u32 | kind_len: u32 | kind: utf8 | n_sections: u32
//! per section:
//!   name_len: u32 | name: utf8 | dtype: u8 (0 = f64, 1 = u64)
//!   ndims: u32 | dims: u64 * ndims | data: 8 bytes * prod(dims)
//! ```
//!
//! Encoder checkpoints, training checkpoints, feature tables, embedding
//! exports and prototype dumps all use this one format, distinguished by
//! `kind`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Matrix;

pub const MAGIC: &[u8; 4] = b"CMPC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub dims: Vec<u64>,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub sections: Vec<Section>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            sections: Vec::new(),
        }
    }

    fn push(&mut self, name: impl Into<String>, dims: Vec<u64>, payload: Payload) {
        debug_assert_eq!(dims.iter().product::<u64>() as usize, payload.len());
        self.sections.push(Section {
            name: name.into(),
            dims,
            payload,
        });
    }

    pub fn put_f64(&mut self, name: impl Into<String>, values: Vec<f64>) {
        let n = values.len() as u64;
        self.push(name, vec![n], Payload::F64(values));
    }

    pub fn put_u64(&mut self, name: impl Into<String>, values: Vec<u64>) {
        let n = values.len() as u64;
        self.push(name, vec![n], Payload::U64(values));
    }

    pub fn put_matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.push(
            name,
            vec![m.rows() as u64, m.cols() as u64],
            Payload::F64(m.data().to_vec()),
        );
    }

    /// UTF-8 text packed into a u64 section: byte length, then 8 bytes per word.
    pub fn put_text(&mut self, name: impl Into<String>, text: &str) {
        let bytes = text.as_bytes();
        let mut words = vec![bytes.len() as u64];
        words.extend(bytes.chunks(8).map(|c| {
            let mut w = [0u8; 8];
            w[..c.len()].copy_from_slice(c);
            u64::from_le_bytes(w)
        }));
        self.put_u64(name, words);
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let words = self.u64s(name)?;
        let (&len, rest) = words
            .split_first()
            .ok_or_else(|| Error::Load(format!("text section `{name}` is empty")))?;
        let bytes: Vec<u8> = rest.iter().flat_map(|w| w.to_le_bytes()).collect();
        if len as usize > bytes.len() {
            return Err(Error::Load(format!("text section `{name}` is truncated")));
        }
        String::from_utf8(bytes[..len as usize].to_vec())
            .map_err(|_| Error::Load(format!("text section `{name}` is not UTF-8")))
    }

    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Load(format!("missing section `{name}` in {}", self.kind)))
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match &self.section(name)?.payload {
            Payload::F64(v) => Ok(v),
            Payload::U64(_) => Err(Error::Load(format!("section `{name}` is not f64"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.section(name)?.payload {
            Payload::U64(v) => Ok(v),
            Payload::F64(_) => Err(Error::Load(format!("section `{name}` is not u64"))),
        }
    }

    pub fn u64_scalar(&self, name: &str) -> Result<u64> {
        match self.u64s(name)? {
            [x] => Ok(*x),
            other => Err(Error::Load(format!(
                "section `{name}` holds {} values, expected 1",
                other.len()
            ))),
        }
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let s = self.section(name)?;
        let [rows, cols] = s.dims[..] else {
            return Err(Error::Load(format!("section `{name}` is not two-dimensional")));
        };
        Matrix::from_vec(rows as usize, cols as usize, self.f64s(name)?.to_vec())
            .map_err(|e| Error::Load(format!("section `{name}`: {e}")))
    }

    pub fn require_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Load(format!(
                "expected a `{kind}` container, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    fn header_len(&self) -> usize {
        4 + 4 + 4 + self.kind.len() + 4
    }

    fn section_header_len(s: &Section) -> usize {
        4 + s.name.len() + 1 + 4 + 8 * s.dims.len()
    }

    /// Byte offset of the first data element of every section, in order.
    pub fn data_offsets(&self) -> Vec<u64> {
        let mut pos = self.header_len();
        self.sections
            .iter()
            .map(|s| {
                pos += Self::section_header_len(s);
                let start = pos;
                pos += 8 * s.payload.len();
                start as u64
            })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            write_str(&mut out, &s.name);
            out.push(match s.payload {
                Payload::F64(_) => 0,
                Payload::U64(_) => 1,
            });
            out.extend_from_slice(&(s.dims.len() as u32).to_le_bytes());
            for d in &s.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &s.payload {
                Payload::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Load("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Load(format!(
                "unsupported format version {version} (expected {VERSION})"
            )));
        }
        let kind = r.string()?;
        let n = r.u32()?;
        let mut sections = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = r.string()?;
            let dtype = r.take(1)?[0];
            let ndims = r.u32()?;
            let dims = (0..ndims).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .filter(|&c| c.saturating_mul(8) <= (bytes.len() - r.pos) as u64)
                .ok_or_else(|| Error::Load(format!("section `{name}` exceeds file size")))?
                as usize;
            let payload = match dtype {
                0 => Payload::F64(
                    (0..count)
                        .map(|_| r.u64().map(f64::from_bits))
                        .collect::<Result<_>>()?,
                ),
                1 => Payload::U64((0..count).map(|_| r.u64()).collect::<Result<_>>()?),
                t => return Err(Error::Load(format!("unknown dtype {t} in `{name}`"))),
            };
            sections.push(Section {
                name,
                dims,
                payload,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Load(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { kind, sections })
    }

    /// Write via a temporary file and rename, so readers never see a partial file.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Load("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Load("invalid utf-8 in name".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test");
        c.put_matrix("w", &Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.25]).unwrap());
        c.put_u64("step", vec![42]);
        c
    }

    #[test]
    fn round_trip_and_offsets() {
        let c = sample();
        let bytes = c.encode();
        assert_eq!(&bytes[..4], b"CMPC");
        let back = Container::decode(&bytes).unwrap();
        assert_eq!(back, c);
        let off = c.data_offsets()[0] as usize;
        assert_eq!(
            f64::from_le_bytes(bytes[off + 8..off + 16].try_into().unwrap()),
            -2.0
        );
        assert_eq!(back.u64_scalar("step").unwrap(), 42);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = sample().encode();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(Container::decode(truncated), Err(Error::Load(_))));
        bytes[4] = 9;
        assert!(matches!(Container::decode(&bytes), Err(Error::Load(m)) if m.contains("version")));
        bytes[0] = b'X';
        assert!(matches!(Container::decode(&bytes), Err(Error::Load(m)) if m.contains("magic")));
    }

    #[test]
    fn text_sections() {
        for text in ["", "abc", "exactly8", "{\"k\": \"ünïcode\"}"] {
            let mut c = Container::new("t");
            c.put_text("s", text);
            assert_eq!(Container::decode(&c.encode()).unwrap().text("s").unwrap(), text);
        }
    }
}
