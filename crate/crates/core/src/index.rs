//! Exact k-nearest-neighbor search by linear scan over pre-transformed vectors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::FeatureArchive;
use crate::corpus::NoteMetadata;
use crate::error::{Error, Result};
use crate::features::{FeatureDescriptor, FeatureVector};
use crate::metric::MetricMatrix;

/// One retrievable recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexItem {
    /// Source path, relative to the corpus root.
    pub path: PathBuf,
    pub metadata: NoteMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    /// `(item id, distance)`, nearest first; ties broken by lower id.
    pub ranked: Vec<(usize, f64)>,
    pub query_descriptor: FeatureDescriptor,
    /// Set when fewer than the requested `k` items were retrievable.
    pub truncated: bool,
}

impl QueryResult {
    pub fn ids(&self) -> Vec<usize> {
        self.ranked.iter().map(|r| r.0).collect()
    }
}

/// Immutable search structure.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    features: Vec<Vec<f64>>,
    transformed: Vec<Vec<f64>>,
    items: Vec<IndexItem>,
    metric: MetricMatrix,
    descriptor: FeatureDescriptor,
}

/// Squared Euclidean distance; shared by build-time checks and queries.
fn squared(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl RetrievalIndex {
    /// `metric = None` means plain Euclidean distance.
    pub fn build(
        features: Vec<FeatureVector>,
        items: Vec<IndexItem>,
        metric: Option<MetricMatrix>,
    ) -> Result<Self> {
        let first = features
            .first()
            .ok_or_else(|| Error::EmptyInput("an index needs at least one item".into()))?;
        if features.len() != items.len() {
            return Err(Error::DimensionMismatch {
                expected: features.len(),
                got: items.len(),
            });
        }
        let descriptor = first.descriptor.clone();
        let dim = first.len();
        for f in &features {
            descriptor.ensure_matches(&f.descriptor)?;
            if f.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: f.len(),
                });
            }
        }
        let metric = match metric {
            Some(m) => {
                descriptor.ensure_matches(&m.descriptor)?;
                if m.input_dim() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: m.input_dim(),
                    });
                }
                m
            }
            None => MetricMatrix::identity(dim, descriptor.clone()),
        };
        let features: Vec<Vec<f64>> = features.into_iter().map(|f| f.values).collect();
        let transformed = metric.transform_rows(&features)?;
        Ok(RetrievalIndex {
            features,
            transformed,
            items,
            metric,
            descriptor,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.metric.input_dim()
    }

    pub fn items(&self) -> &[IndexItem] {
        &self.items
    }

    pub fn item(&self, id: usize) -> Option<&IndexItem> {
        self.items.get(id)
    }

    pub fn metric(&self) -> &MetricMatrix {
        &self.metric
    }

    pub fn descriptor(&self) -> &FeatureDescriptor {
        &self.descriptor
    }

    /// Stored (untransformed) feature vector of an item.
    pub fn vector(&self, id: usize) -> Option<FeatureVector> {
        self.features.get(id).map(|v| FeatureVector {
            values: v.clone(),
            descriptor: self.descriptor.clone(),
        })
    }

    pub fn id_of(&self, path: &Path) -> Option<usize> {
        self.items.iter().position(|it| it.path == path)
    }

    /// Exact `k` nearest items under the index metric, skipping `exclude`.
    pub fn query(&self, q: &FeatureVector, k: usize, exclude: &[usize]) -> Result<QueryResult> {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        self.descriptor.ensure_matches(&q.descriptor)?;
        let tq = self.metric.transform(&q.values)?;
        let mut scored: Vec<(usize, f64)> = self
            .transformed
            .iter()
            .enumerate()
            .filter(|(id, _)| !exclude.contains(id))
            .map(|(id, v)| (id, squared(&tq, v)))
            .collect();
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let truncated = scored.len() < k;
        scored.truncate(k);
        Ok(QueryResult {
            ranked: scored.into_iter().map(|(id, d2)| (id, d2.sqrt())).collect(),
            query_descriptor: q.descriptor.clone(),
            truncated,
        })
    }

    /// Query with an indexed item's own vector, excluding the item itself.
    pub fn query_item(&self, id: usize, k: usize) -> Result<QueryResult> {
        let q = self.vector(id).ok_or_else(|| Error::NotEnoughItems {
            requested: id + 1,
            available: self.len(),
        })?;
        self.query(&q, k, &[id])
    }

    /// Writes `features.f32/json`, `items.json` and `metric.bin` into `dir`.
    pub fn save(&self, dir: &Path, archive: &FeatureArchive) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.descriptor.ensure_matches(archive.descriptor())?;
        let archive = FeatureArchive {
            header: archive.header.clone(),
            rows: self.features.clone(),
        };
        archive.save(&dir.join("features"))?;
        let items = dir.join("items.json");
        fs::write(&items, serde_json::to_string_pretty(&self.items)?)
            .map_err(|e| Error::io(&items, e))?;
        self.metric.save(&dir.join("metric.bin"), None)
    }

    /// Loads an index saved by [`RetrievalIndex::save`], with its feature archive.
    pub fn load(dir: &Path) -> Result<(Self, FeatureArchive)> {
        let archive = FeatureArchive::load(&dir.join("features"))?;
        let items_path = dir.join("items.json");
        let text = fs::read_to_string(&items_path).map_err(|e| Error::io(&items_path, e))?;
        let items: Vec<IndexItem> = serde_json::from_str(&text)?;
        let (metric, _) = MetricMatrix::load(&dir.join("metric.bin"))?;
        let features = (0..archive.len()).map(|r| archive.vector(r)).collect();
        let index = RetrievalIndex::build(features, items, Some(metric))?;
        Ok((index, archive))
    }
}
