//! On-disk feature matrices: a little-endian `f32` row-major body next to a
//! JSON sidecar describing rows, columns and provenance.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureDescriptor, FeatureSpec, FeatureVector};
use crate::scattering::{CompressionStats, ScatteringPath};

const ARCHIVE_VERSION: u32 = 1;

/// Everything in the sidecar JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub version: u32,
    pub rows: usize,
    pub cols: usize,
    pub descriptor: FeatureDescriptor,
    pub spec: FeatureSpec,
    /// Set when the values are log compressed.
    pub compression: Option<CompressionStats>,
    /// Scattering path per column; empty for MFCC families.
    pub paths: Vec<ScatteringPath>,
    pub averaging_scale: Option<f64>,
    /// One key per row, normally the manifest-relative audio path.
    pub keys: Vec<String>,
}

/// A feature matrix with one row per recording.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureArchive {
    pub header: ArchiveHeader,
    pub rows: Vec<Vec<f64>>,
}

/// `base.f32` and `base.json` for a base path given with or without either extension.
pub fn archive_paths(base: &Path) -> (PathBuf, PathBuf) {
    let stem = match base.extension().and_then(|e| e.to_str()) {
        Some("f32") | Some("json") => base.with_extension(""),
        _ => base.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("f32"), with("json"))
}

impl FeatureArchive {
    pub fn new(
        spec: FeatureSpec,
        descriptor: FeatureDescriptor,
        compression: Option<CompressionStats>,
        paths: Vec<ScatteringPath>,
        keys: Vec<String>,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if keys.len() != rows.len() {
            return Err(Error::DimensionMismatch {
                expected: keys.len(),
                got: rows.len(),
            });
        }
        let cols = rows.first().map_or(paths.len(), Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch {
                expected: cols,
                got: bad.len(),
            });
        }
        if !paths.is_empty() && paths.len() != cols {
            return Err(Error::DimensionMismatch {
                expected: paths.len(),
                got: cols,
            });
        }
        Ok(FeatureArchive {
            header: ArchiveHeader {
                version: ARCHIVE_VERSION,
                rows: rows.len(),
                cols,
                averaging_scale: spec.averaging_scale(),
                descriptor,
                spec,
                compression,
                paths,
                keys,
            },
            rows,
        })
    }

    pub fn descriptor(&self) -> &FeatureDescriptor {
        &self.header.descriptor
    }

    pub fn keys(&self) -> &[String] {
        &self.header.keys
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.header.cols
    }

    pub fn vector(&self, row: usize) -> FeatureVector {
        FeatureVector {
            values: self.rows[row].clone(),
            descriptor: self.header.descriptor.clone(),
        }
    }

    pub fn row_of(&self, key: &str) -> Option<usize> {
        self.header.keys.iter().position(|k| k == key)
    }

    /// Writes `base.f32` and `base.json`.
    pub fn save(&self, base: &Path) -> Result<()> {
        let (body, sidecar) = archive_paths(base);
        let mut bytes = Vec::with_capacity(self.rows.len() * self.header.cols * 4);
        for v in self.rows.iter().flatten() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::write(&body, bytes).map_err(|e| Error::io(&body, e))?;
        let json = serde_json::to_string_pretty(&self.header)?;
        fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(base: &Path) -> Result<Self> {
        let (body, sidecar) = archive_paths(base);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let header: ArchiveHeader = serde_json::from_str(&text)?;
        let malformed = |reason: String| Error::MalformedArchive {
            path: body.clone(),
            reason,
        };
        if header.version != ARCHIVE_VERSION {
            return Err(malformed(format!("unsupported version {}", header.version)));
        }
        if header.keys.len() != header.rows {
            return Err(malformed(format!(
                "{} keys for {} rows",
                header.keys.len(),
                header.rows
            )));
        }
        let bytes = fs::read(&body).map_err(|e| Error::io(&body, e))?;
        if bytes.len() != header.rows * header.cols * 4 {
            return Err(malformed(format!(
                "{} bytes, expected {} x {} f32",
                bytes.len(),
                header.rows,
                header.cols
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let rows = if header.cols == 0 {
            vec![Vec::new(); header.rows]
        } else {
            values.chunks(header.cols).map(<[f64]>::to_vec).collect()
        };
        Ok(FeatureArchive { header, rows })
    }

    /// Rows rounded to `f32` precision, as they would be after a save and reload.
    pub fn quantized(mut self) -> Self {
        for v in self.rows.iter_mut().flatten() {
            *v = *v as f32 as f64;
        }
        self
    }
}
