//! COAPTEMB: named f32 vectors exported from an external model.
//!
//! Layout (little-endian): magic `COAPTEMB`, u32 version, u8 kind
//! (0 token, 1 image), u32 dim, u32 count, then `count` records of
//! `{u16 name_len, name (UTF-8), dim × f32}`.

use std::collections::HashSet;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use super::EncoderError;
use crate::autodiff::Tensor;
use crate::rng::{rng_for, stream};
use crate::tokenizer::{normalize, Vocabulary, EOS, SOS, UNK};

pub const EXPORT_MAGIC: &[u8; 8] = b"COAPTEMB";
pub const EXPORT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportKind {
    Token,
    Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingExport {
    pub kind: ExportKind,
    pub dim: usize,
    pub records: Vec<(String, Vec<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], EncoderError> {
        if self.bytes.len() - self.pos < n {
            return Err(EncoderError::Format {
                offset: self.pos,
                reason: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, EncoderError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl EmbeddingExport {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(EXPORT_MAGIC);
        out.extend_from_slice(&EXPORT_VERSION.to_le_bytes());
        out.push(match self.kind {
            ExportKind::Token => 0,
            ExportKind::Image => 1,
        });
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, v) in &self.records {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Parses `bytes`, rejecting files whose dim differs from `expected_dim`.
    pub fn from_bytes(bytes: &[u8], expected_dim: Option<usize>) -> Result<Self, EncoderError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != EXPORT_MAGIC {
            return Err(EncoderError::Format {
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        let version = r.u32("version")?;
        if version != EXPORT_VERSION {
            return Err(EncoderError::Format {
                offset: 8,
                reason: format!("unsupported version {version}"),
            });
        }
        let kind = match r.take(1, "kind")?[0] {
            0 => ExportKind::Token,
            1 => ExportKind::Image,
            k => {
                return Err(EncoderError::Format {
                    offset: 12,
                    reason: format!("unknown kind {k}"),
                })
            }
        };
        let dim = r.u32("dim")? as usize;
        if let Some(want) = expected_dim {
            if dim != want {
                return Err(EncoderError::Format {
                    offset: 13,
                    reason: format!("dim {dim} does not match engine dim {want}"),
                });
            }
        }
        let count = r.u32("count")? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let start = r.pos;
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| EncoderError::Format {
                offset: start + 2,
                reason: "name is not UTF-8".into(),
            })?;
            let raw = r.take(4 * dim, "vector")?;
            let v = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            records.push((name.to_owned(), v));
        }
        if r.pos != bytes.len() {
            return Err(EncoderError::Format {
                offset: r.pos,
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { kind, dim, records })
    }

    pub fn write(&self, path: &Path) -> Result<(), EncoderError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    /// Records as `1 × dim` feature rows.
    pub fn features(&self) -> Vec<(String, Tensor)> {
        self.records
            .iter()
            .map(|(n, v)| (n.clone(), Tensor::row(v.iter().map(|&x| f64::from(x)).collect())))
            .collect()
    }
}

pub fn load_embedding_export(path: &Path, expected_dim: Option<usize>) -> Result<EmbeddingExport, EncoderError> {
    EmbeddingExport::from_bytes(&std::fs::read(path)?, expected_dim)
}

/// Vocabulary and frozen table from a token export.
///
/// Record names must be single normalized words; `<sos>`, `<eos>` and
/// `<unk>` rows are taken from the file when present and drawn from
/// N(0, (1/√d)²) otherwise.
pub fn token_table_from_export(export: &EmbeddingExport, seed: u64) -> Result<(Vocabulary, Tensor), EncoderError> {
    if export.kind != ExportKind::Token {
        return Err(EncoderError::Config("expected a token export".into()));
    }
    let reserved = ["<sos>", "<eos>", "<unk>"];
    let mut seen = HashSet::new();
    let mut words = Vec::new();
    for (name, _) in &export.records {
        if !seen.insert(name.as_str()) {
            return Err(EncoderError::Config(format!("duplicate record {name:?}")));
        }
        if reserved.contains(&name.as_str()) {
            continue;
        }
        if name.is_empty() || normalize(name) != *name || name.contains(' ') {
            return Err(EncoderError::Config(format!(
                "record {name:?} is not a single normalized word"
            )));
        }
        words.push(name.clone());
    }
    if words.is_empty() {
        return Err(EncoderError::Config("token export has no words".into()));
    }
    let vocab = Vocabulary::build(&[words]).map_err(|e| EncoderError::Config(e.to_string()))?;
    let d = export.dim;
    let mut table = Tensor::zeros(vocab.size(), d);
    let mut rng = rng_for(seed, stream::SPECIAL_TOKENS);
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite std");
    for id in [SOS, EOS, UNK] {
        for v in table.row_slice_mut(id) {
            *v = normal.sample(&mut rng);
        }
    }
    for (name, v) in &export.records {
        let id = match name.as_str() {
            "<sos>" => SOS,
            "<eos>" => EOS,
            "<unk>" => UNK,
            w => vocab.id(w).expect("built from these names"),
        };
        for (dst, &src) in table.row_slice_mut(id).iter_mut().zip(v) {
            *dst = f64::from(src);
        }
    }
    Ok((vocab, table))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingExport {
        EmbeddingExport {
            kind: ExportKind::Token,
            dim: 3,
            records: vec![
                ("water".into(), vec![1.0, -2.5, 0.125]),
                ("<eos>".into(), vec![0.0, 1.0, 0.0]),
                ("bowl".into(), vec![f32::MIN_POSITIVE, 3.0, -0.0]),
            ],
        }
    }

    #[test]
    fn round_trip_bitwise() {
        let e = sample();
        let bytes = e.to_bytes();
        let back = EmbeddingExport::from_bytes(&bytes, Some(3)).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, e);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], b"COAPTEMB");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(bytes[12], 0);
        assert_eq!(&bytes[13..17], &3u32.to_le_bytes());
        assert_eq!(&bytes[17..21], &3u32.to_le_bytes());
        assert_eq!(&bytes[21..23], &5u16.to_le_bytes());
        assert_eq!(&bytes[23..28], b"water");
    }

    #[test]
    fn empty_is_valid() {
        let e = EmbeddingExport {
            kind: ExportKind::Image,
            dim: 7,
            records: vec![],
        };
        assert_eq!(EmbeddingExport::from_bytes(&e.to_bytes(), Some(7)).unwrap(), e);
    }

    #[test]
    fn malformed_files_name_offsets() {
        let bytes = sample().to_bytes();
        let offset = |r: Result<EmbeddingExport, EncoderError>| match r {
            Err(EncoderError::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(offset(EmbeddingExport::from_bytes(&bad, None)), 0);
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert_eq!(offset(EmbeddingExport::from_bytes(&bad, None)), 8);
        assert_eq!(offset(EmbeddingExport::from_bytes(&bytes, Some(4))), 13);
        let cut = &bytes[..bytes.len() - 2];
        assert_eq!(offset(EmbeddingExport::from_bytes(cut, None)), bytes.len() - 12);
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(offset(EmbeddingExport::from_bytes(&long, None)), bytes.len());
    }

    #[test]
    fn token_table_rows() {
        let (vocab, table) = token_table_from_export(&sample(), 0).unwrap();
        assert_eq!(vocab.size(), 5);
        assert_eq!(table.row_slice(vocab.id("water").unwrap()), &[1.0, -2.5, 0.125]);
        assert_eq!(table.row_slice(EOS), &[0.0, 1.0, 0.0]);
        let mut multi = sample();
        multi.records.push(("sea lake".into(), vec![0.0; 3]));
        assert!(token_table_from_export(&multi, 0).is_err());
    }
}
