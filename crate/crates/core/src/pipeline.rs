//! Artifact-level steps shared by the command line and the server: extract a
//! manifest into an archive, compress it, train a metric, build an index.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::archive::FeatureArchive;
use crate::corpus::{CorpusManifest, ManifestEntry, Namespace, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::features::{compress_vector, Extractor, FeatureSpec, FeatureVector};
use crate::index::{IndexItem, RetrievalIndex};
use crate::metric::{train_lmnn, LabeledFeatures, LmnnConfig, LmnnOutcome, MetricMatrix};
use crate::scattering::{fit_compression, DEFAULT_EPSILON};
use crate::signal::{load_wav, Waveform};

pub fn entry_key(entry: &ManifestEntry) -> String {
    entry.path.to_string_lossy().replace('\\', "/")
}

/// Raw features for every manifest entry, keyed by manifest-relative path.
pub fn extract_archive(manifest: &CorpusManifest, spec: &FeatureSpec) -> Result<FeatureArchive> {
    let extractor = Extractor::new(spec.clone())?;
    let rows: Vec<Vec<f64>> = manifest
        .entries
        .par_iter()
        .map(|e| Ok(extractor.extract(&load_wav(&manifest.resolve(e))?)?.values))
        .collect::<Result<_>>()?;
    FeatureArchive::new(
        spec.clone(),
        extractor.descriptor().clone(),
        None,
        extractor.paths().map(<[_]>::to_vec).unwrap_or_default(),
        manifest.entries.iter().map(entry_key).collect(),
        rows,
    )
}

/// Same as [`extract_archive`] for in-memory waveforms with caller-chosen keys.
pub fn extract_waves(waves: &[Waveform], keys: Vec<String>, spec: &FeatureSpec) -> Result<FeatureArchive> {
    let extractor = Extractor::new(spec.clone())?;
    let rows = extractor
        .extract_batch(waves)?
        .into_iter()
        .map(|v| v.values)
        .collect();
    FeatureArchive::new(
        spec.clone(),
        extractor.descriptor().clone(),
        None,
        extractor.paths().map(<[_]>::to_vec).unwrap_or_default(),
        keys,
        rows,
    )
}

/// Log-compresses a raw scattering archive with medians over all of its rows.
/// Other families pass through unchanged.
pub fn compress_archive(raw: &FeatureArchive) -> Result<FeatureArchive> {
    if raw.header.compression.is_some() {
        return Err(Error::InvalidConfig("archive is already compressed".into()));
    }
    let extractor = Extractor::new(raw.header.spec.clone())?;
    raw.descriptor().ensure_matches(extractor.descriptor())?;
    if extractor.paths().is_none() {
        return Ok(raw.clone());
    }
    let vectors: Vec<FeatureVector> = (0..raw.len()).map(|r| raw.vector(r)).collect();
    let scattering = vectors
        .iter()
        .map(|v| extractor.as_scattering(v))
        .collect::<Result<Vec<_>>>()?;
    let stats = fit_compression(&scattering, DEFAULT_EPSILON)?;
    let rows = vectors
        .iter()
        .map(|v| compress_vector(&extractor, v, &stats).map(|c| c.values))
        .collect::<Result<_>>()?;
    FeatureArchive::new(
        raw.header.spec.clone(),
        raw.descriptor().compressed(&stats),
        Some(stats),
        raw.header.paths.clone(),
        raw.keys().to_vec(),
        rows,
    )
}

/// Manifest entry for each archive row, matched by key.
pub fn align_entries<'a>(archive: &FeatureArchive, manifest: &'a CorpusManifest) -> Result<Vec<&'a ManifestEntry>> {
    let by_key: std::collections::HashMap<String, &ManifestEntry> =
        manifest.entries.iter().map(|e| (entry_key(e), e)).collect();
    archive
        .keys()
        .iter()
        .map(|k| {
            by_key.get(k).copied().ok_or_else(|| {
                Error::InvalidConfig(format!("archive row {k:?} is not in the manifest"))
            })
        })
        .collect()
}

pub fn labels_for(archive: &FeatureArchive, manifest: &CorpusManifest, namespace: Namespace) -> Result<Vec<String>> {
    Ok(align_entries(archive, manifest)?
        .into_iter()
        .map(|e| e.metadata.label(namespace))
        .collect())
}

/// LMNN over every archive row with labels from `namespace`.
pub fn train_metric(
    archive: &FeatureArchive,
    manifest: &CorpusManifest,
    namespace: Namespace,
    cfg: &LmnnConfig,
) -> Result<LmnnOutcome> {
    let labels = labels_for(archive, manifest, namespace)?;
    let data = LabeledFeatures::from_named(&archive.rows, &labels)?.with_namespace(namespace);
    train_lmnn(&data, archive.descriptor().clone(), cfg)
}

pub fn build_index(
    archive: &FeatureArchive,
    manifest: &CorpusManifest,
    metric: Option<MetricMatrix>,
) -> Result<RetrievalIndex> {
    let items = align_entries(archive, manifest)?
        .into_iter()
        .map(|e| IndexItem {
            path: e.path.clone(),
            metadata: e.metadata.clone(),
        })
        .collect();
    let vectors = (0..archive.len()).map(|r| archive.vector(r)).collect();
    RetrievalIndex::build(vectors, items, metric)
}

/// Saves the index plus a manifest copy whose root is absolute, so the
/// directory alone is enough to serve queries and audio.
pub fn save_index(dir: &Path, index: &RetrievalIndex, archive: &FeatureArchive, manifest: &CorpusManifest) -> Result<()> {
    index.save(dir, archive)?;
    let mut copy = manifest.clone();
    copy.root = absolute(&manifest.root);
    copy.save(&dir.join(MANIFEST_FILE))
}

/// Index, its archive, and the manifest saved next to it.
pub fn load_index(dir: &Path) -> Result<(RetrievalIndex, FeatureArchive, CorpusManifest)> {
    let (index, archive) = RetrievalIndex::load(dir)?;
    let manifest = CorpusManifest::load(&dir.join(MANIFEST_FILE))?;
    Ok((index, archive, manifest))
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}
