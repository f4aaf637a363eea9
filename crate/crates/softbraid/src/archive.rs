//! Single-file parameter archive: one JSON manifest line followed by a
//! little-endian f64 blob.
//!
//! The manifest names every tensor with its shape and byte offset into
//! the blob, so readers can load entries selectively and writers stay
//! append-only. Offsets are relative to the first byte after the
//! manifest's terminating newline.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const ARCHIVE_VERSION: &str = "sbr-ckpt-v1";

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: String,
    step: u64,
    entries: Vec<ManifestEntry>,
}

/// An ordered set of named tensors plus the optimizer step that produced
/// them. Entry order is preserved through save/load.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterArchive {
    pub step: u64,
    entries: Vec<(String, Tensor)>,
}

impl ParameterArchive {
    pub fn new(step: u64) -> Self {
        ParameterArchive { step, entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate archive entry {name}"
        );
        self.entries.push((name, tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Removes and returns the named entry, for consumers that move
    /// tensors out while validating completeness.
    pub fn take(&mut self, name: &str) -> Option<Tensor> {
        let idx = self.entries.iter().position(|(n, _)| n == name)?;
        Some(self.entries.remove(idx).1)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut offset = 0u64;
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                    offset,
                };
                offset += (t.rows() * t.cols() * 8) as u64;
                e
            })
            .collect();
        let manifest = Manifest {
            version: ARCHIVE_VERSION.to_string(),
            step: self.step,
            entries,
        };
        let header = serde_json::to_string(&manifest)
            .map_err(|e| Error::invalid(format!("manifest encode: {e}")))?;
        w.write_all(header.as_bytes())?;
        w.write_all(b"\n")?;
        for (_, t) in &self.entries {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path)?;
        let mut buf = std::io::BufWriter::new(file);
        self.write_to(&mut buf)?;
        buf.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read, origin: &str) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let newline = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| parse_err(1, "missing manifest line".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| parse_err(1, format!("manifest: {e}")))?;
        if manifest.version != ARCHIVE_VERSION {
            return Err(Error::Version {
                path: origin.to_string(),
                expected: ARCHIVE_VERSION,
                found: manifest.version,
            });
        }
        let blob = &bytes[newline + 1..];
        let mut entries = Vec::with_capacity(manifest.entries.len());
        let mut claimed = BTreeMap::new();
        for e in &manifest.entries {
            if let Some(prev) = claimed.insert(e.name.clone(), ()) {
                let _ = prev;
                return Err(parse_err(1, format!("duplicate entry {}", e.name)));
            }
            let count = e.rows * e.cols;
            let start = e.offset as usize;
            let end = start + count * 8;
            if end > blob.len() {
                return Err(parse_err(
                    1,
                    format!(
                        "entry {} needs bytes {start}..{end} but blob has {}",
                        e.name,
                        blob.len()
                    ),
                ));
            }
            let data: Vec<f64> = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(parse_err(1, format!("entry {} holds non-finite values", e.name)));
            }
            entries.push((e.name.clone(), Tensor::from_vec(e.rows, e.cols, data)));
        }
        Ok(ParameterArchive { step: manifest.step, entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file), &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterArchive {
        let mut a = ParameterArchive::new(42);
        a.push("enc.l1.w", Tensor::from_vec(2, 3, vec![1.0, -2.0, 3.5, 0.0, 4.0, -0.125]));
        a.push("enc.l1.b", Tensor::from_vec(1, 3, vec![0.25, 0.5, 0.75]));
        a.push("head.l3.w", Tensor::zeros(3, 2));
        a
    }

    #[test]
    fn roundtrip_preserves_order_shapes_and_bits() {
        let a = sample();
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        let b = ParameterArchive::read_from(bytes.as_slice(), "mem").unwrap();
        assert_eq!(a, b);
        let names: Vec<_> = b.names().collect();
        assert_eq!(names, ["enc.l1.w", "enc.l1.b", "head.l3.w"]);
        assert_eq!(b.step, 42);
        assert_eq!(b.get("enc.l1.w").unwrap().get(0, 2), 3.5);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.sbr");
        let a = sample();
        a.save(&path).unwrap();
        let b = ParameterArchive::load(&path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_version_is_a_version_error() {
        let a = sample();
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        let text = String::from_utf8_lossy(&bytes).replace("sbr-ckpt-v1", "sbr-ckpt-v9");
        let err = ParameterArchive::read_from(text.as_bytes(), "mem").unwrap_err();
        match err {
            Error::Version { expected, found, .. } => {
                assert_eq!(expected, "sbr-ckpt-v1");
                assert_eq!(found, "sbr-ckpt-v9");
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_is_a_parse_error() {
        let a = sample();
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 4);
        let err = ParameterArchive::read_from(bytes.as_slice(), "mem").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "got {err:?}");
    }

    #[test]
    fn missing_manifest_newline_is_a_parse_error() {
        let err = ParameterArchive::read_from(&b"{\"version\":\"sbr-ckpt-v1\"}"[..], "mem")
            .unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn take_removes_entries() {
        let mut a = sample();
        let t = a.take("enc.l1.b").unwrap();
        assert_eq!(t.cols(), 3);
        assert!(a.get("enc.l1.b").is_none());
        assert_eq!(a.len(), 2);
        assert!(a.take("enc.l1.b").is_none());
    }
}
