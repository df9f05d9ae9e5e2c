//! Read-only serving state loaded from an index directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{ensure, Context, Result};
use qbe_core::archive::FeatureArchive;
use qbe_core::corpus::{CorpusManifest, Namespace};
use qbe_core::embedding::{diffusion_map, embedding_points, DiffusionParams, EmbeddingPoint, SubsetFilter};
use qbe_core::features::{Extractor, FeatureVector};
use qbe_core::index::{IndexItem, QueryResult, RetrievalIndex};
use qbe_core::pipeline::load_index;
use qbe_core::scattering::CompressionStats;
use qbe_core::signal::Waveform;
use serde::Serialize;
use tokio::sync::Semaphore;

use crate::config::ServiceConfig;

pub struct ServiceState {
    pub config: ServiceConfig,
    pub index: RetrievalIndex,
    pub archive: FeatureArchive,
    pub manifest: CorpusManifest,
    pub extractor: Extractor,
    pub compression: Option<CompressionStats>,
    pub corpus_root: PathBuf,
    /// Bounds concurrent feature extractions.
    pub workers: Semaphore,
    embeddings: Mutex<HashMap<(Namespace, String), Arc<Vec<EmbeddingPoint>>>>,
}

/// Public summary served at `/config`.
#[derive(Debug, Clone, Serialize)]
pub struct PublicConfig {
    pub feature: String,
    pub descriptor: String,
    pub averaging_scale: Option<f64>,
    pub metric: &'static str,
    pub items: usize,
    pub dim: usize,
    pub default_k: usize,
    pub max_audio_seconds: f64,
    pub workers: usize,
}

impl ServiceState {
    pub fn load(config: ServiceConfig) -> Result<Self> {
        let (index, archive, manifest) = load_index(&config.index_dir)
            .with_context(|| format!("loading index from {}", config.index_dir.display()))?;
        Self::from_parts(config, index, archive, manifest)
    }

    /// Checks that index, metric, archive and compression stats agree.
    pub fn from_parts(
        config: ServiceConfig,
        index: RetrievalIndex,
        archive: FeatureArchive,
        manifest: CorpusManifest,
    ) -> Result<Self> {
        config.validate()?;
        let extractor = Extractor::new(archive.header.spec.clone())?;
        let compression = archive.header.compression.clone();
        let expected = match &compression {
            Some(stats) => extractor.descriptor().compressed(stats),
            None => extractor.descriptor().clone(),
        };
        ensure!(
            expected == *archive.descriptor(),
            "archive descriptor {} does not follow from its spec and stats ({expected})",
            archive.descriptor()
        );
        ensure!(
            index.descriptor() == archive.descriptor(),
            "index descriptor {} differs from archive {}",
            index.descriptor(),
            archive.descriptor()
        );
        ensure!(
            index.metric().descriptor == *index.descriptor(),
            "metric was trained on other features"
        );
        let corpus_root = config.corpus_root.clone().unwrap_or_else(|| manifest.root.clone());
        Ok(ServiceState {
            workers: Semaphore::new(config.workers),
            config,
            index,
            archive,
            manifest,
            extractor,
            compression,
            corpus_root,
            embeddings: Mutex::new(HashMap::new()),
        })
    }

    pub fn public_config(&self) -> PublicConfig {
        PublicConfig {
            feature: self.extractor.spec().name(),
            descriptor: self.index.descriptor().to_string(),
            averaging_scale: self.extractor.spec().averaging_scale(),
            metric: if self.index.metric().is_identity() { "euclidean" } else { "lmnn" },
            items: self.index.len(),
            dim: self.index.dim(),
            default_k: self.config.default_k,
            max_audio_seconds: self.config.max_audio_seconds,
            workers: self.config.workers,
        }
    }

    pub fn item(&self, id: usize) -> Option<&IndexItem> {
        self.index.item(id)
    }

    pub fn audio_path(&self, id: usize) -> Option<PathBuf> {
        self.item(id).map(|it| self.corpus_root.join(&it.path))
    }

    /// Query-time pipeline for new audio: resample, extract at the index's
    /// settings, compress with the frozen corpus medians.
    pub fn features_for(&self, w: &Waveform) -> Result<FeatureVector> {
        Ok(match &self.compression {
            Some(stats) => self.extractor.extract_compressed(w, stats)?,
            None => self.extractor.extract(w)?,
        })
    }

    pub fn query_vector(&self, q: &FeatureVector, k: usize, exclude: &[usize]) -> Result<QueryResult> {
        Ok(self.index.query(q, k, exclude)?)
    }

    /// Diffusion coordinates of the filtered subset, cached per request shape.
    pub fn embedding(&self, namespace: Namespace, filter: &str) -> Result<Arc<Vec<EmbeddingPoint>>> {
        let key = (namespace, filter.to_string());
        if let Some(hit) = self.embeddings.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let subset: SubsetFilter = filter.parse()?;
        let metadata: Vec<_> = self.index.items().iter().map(|it| it.metadata.clone()).collect();
        let ids = subset.select(&metadata);
        let rows: Vec<Vec<f64>> = ids
            .iter()
            .map(|&i| self.index.vector(i).expect("id in range").values)
            .collect();
        let embedding = diffusion_map(&rows, Some(self.index.metric()), &DiffusionParams::default())?;
        let points = Arc::new(embedding_points(&embedding, &ids, &metadata, namespace));
        self.embeddings
            .lock()
            .expect("cache lock")
            .insert(key, points.clone());
        Ok(points)
    }
}

/// Resolves a path against a base unless it is already absolute.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
