//! Train/test splitting, precision at k, and the feature x T x metric x
//! namespace evaluation grid.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Namespace, NoteMetadata};
use crate::error::{Error, Result};
use crate::features::{compress_vector, Extractor, FeatureDescriptor, FeatureSpec, FeatureVector};
use crate::index::{IndexItem, QueryResult, RetrievalIndex};
use crate::metric::{train_lmnn, LabeledFeatures, LmnnConfig, MetricMatrix, TrainingSummary};
use crate::scattering::{fit_compression, CompressionStats, DEFAULT_EPSILON};
use crate::signal::Waveform;

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class proportional split, deterministic in `seed`. Every class keeps at
/// least one member in train; singleton classes never reach test.
pub fn stratified_split(labels: &[String], test_fraction: f64, seed: u64) -> Result<Split> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("nothing to split".into()));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut classes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for members in classes.values_mut() {
        members.shuffle(&mut rng);
        let n = members.len();
        let n_test = ((n as f64 * test_fraction).round() as usize).min(n - 1);
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

/// Fraction of the top `k` results whose label equals `query_label`.
pub fn precision_at_k(
    result: &QueryResult,
    query_label: &str,
    item_labels: &[String],
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if result.ranked.len() < k {
        return Err(Error::NotEnoughItems {
            requested: k,
            available: result.ranked.len(),
        });
    }
    let hits = result.ranked[..k]
        .iter()
        .filter(|(id, _)| item_labels[*id] == query_label)
        .count();
    Ok(hits as f64 / k as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Euclidean,
    Lmnn,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Euclidean => "euclidean",
            MetricKind::Lmnn => "lmnn",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" | "none" => Ok(MetricKind::Euclidean),
            "lmnn" => Ok(MetricKind::Lmnn),
            other => Err(Error::InvalidConfig(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrecision {
    pub queries: usize,
    pub p_at_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub feature: String,
    pub feature_descriptor: FeatureDescriptor,
    /// Seconds; absent for MFCC families.
    pub averaging_scale: Option<f64>,
    pub metric: MetricKind,
    pub namespace: Namespace,
    pub k: usize,
    pub p_at_k: f64,
    pub per_class: BTreeMap<String, ClassPrecision>,
    /// `co_retrieval[a][b]`: fraction of class-`a` queries whose top k holds a class-`b` item.
    pub co_retrieval: BTreeMap<String, BTreeMap<String, f64>>,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub training: Option<TrainingSummary>,
}

impl EvalReport {
    /// Fraction of `query_class` queries whose top k contains `other`.
    pub fn confusion(&self, query_class: &str, other: &str) -> f64 {
        self.co_retrieval
            .get(query_class)
            .and_then(|m| m.get(other))
            .copied()
            .unwrap_or(0.0)
    }
}

/// Scores that do not depend on how the metric was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalScores {
    pub p_at_k: f64,
    pub per_class: BTreeMap<String, ClassPrecision>,
    pub co_retrieval: BTreeMap<String, BTreeMap<String, f64>>,
}

/// Queries every test row against an index of the train rows.
pub fn score_retrieval(
    vectors: &[FeatureVector],
    labels: &[String],
    split: &Split,
    metric: Option<MetricMatrix>,
    k: usize,
) -> Result<RetrievalScores> {
    if split.test.is_empty() {
        return Err(Error::EmptyInput("no test queries".into()));
    }
    let train_vectors: Vec<FeatureVector> = split.train.iter().map(|&i| vectors[i].clone()).collect();
    let train_labels: Vec<String> = split.train.iter().map(|&i| labels[i].clone()).collect();
    let items = split
        .train
        .iter()
        .map(|&i| IndexItem {
            path: format!("#{i}").into(),
            metadata: NoteMetadata::new("-", "-", None, crate::corpus::Dynamics::Mf),
        })
        .collect();
    let index = RetrievalIndex::build(train_vectors, items, metric)?;

    let per_query: Vec<(String, f64, Vec<String>)> = split
        .test
        .par_iter()
        .map(|&q| {
            let result = index.query(&vectors[q], k, &[])?;
            let p = precision_at_k(&result, &labels[q], &train_labels, k)?;
            let mut seen: Vec<String> = result.ranked.iter().map(|(id, _)| train_labels[*id].clone()).collect();
            seen.sort();
            seen.dedup();
            Ok((labels[q].clone(), p, seen))
        })
        .collect::<Result<_>>()?;

    let mut sums: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    let mut co: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (label, p, seen) in &per_query {
        let e = sums.entry(label.clone()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += p;
        let row = co.entry(label.clone()).or_default();
        for s in seen {
            *row.entry(s.clone()).or_insert(0.0) += 1.0;
        }
    }
    for (label, row) in co.iter_mut() {
        let n = sums[label].0 as f64;
        for v in row.values_mut() {
            *v /= n;
        }
    }
    Ok(RetrievalScores {
        p_at_k: per_query.iter().map(|q| q.1).sum::<f64>() / per_query.len() as f64,
        per_class: sums
            .into_iter()
            .map(|(l, (n, s))| {
                (
                    l,
                    ClassPrecision {
                        queries: n,
                        p_at_k: s / n as f64,
                    },
                )
            })
            .collect(),
        co_retrieval: co,
    })
}

/// Feature values for a whole corpus under one spec, compressed when scattering.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub spec: FeatureSpec,
    pub vectors: Vec<FeatureVector>,
    pub compression: Option<CompressionStats>,
}

impl FeatureTable {
    /// Extracts every waveform; scattering features are log compressed with
    /// medians taken over the whole collection.
    pub fn extract(spec: &FeatureSpec, waves: &[Waveform]) -> Result<Self> {
        let extractor = Extractor::new(spec.clone())?;
        let raw = extractor.extract_batch(waves)?;
        Self::from_raw(&extractor, raw)
    }

    pub fn from_raw(extractor: &Extractor, raw: Vec<FeatureVector>) -> Result<Self> {
        if extractor.paths().is_none() {
            return Ok(FeatureTable {
                spec: extractor.spec().clone(),
                vectors: raw,
                compression: None,
            });
        }
        let scattering: Vec<_> = raw
            .iter()
            .map(|v| extractor.as_scattering(v))
            .collect::<Result<_>>()?;
        let stats = fit_compression(&scattering, DEFAULT_EPSILON)?;
        let vectors = raw
            .iter()
            .map(|v| compress_vector(extractor, v, &stats))
            .collect::<Result<_>>()?;
        Ok(FeatureTable {
            spec: extractor.spec().clone(),
            vectors,
            compression: Some(stats),
        })
    }

    pub fn descriptor(&self) -> FeatureDescriptor {
        self.vectors
            .first()
            .map(|v| v.descriptor.clone())
            .unwrap_or_else(|| self.spec.descriptor())
    }
}

/// One grid cell: optionally trains LMNN on the train split, then scores.
pub fn evaluate_cell(
    table: &FeatureTable,
    labels: &[String],
    namespace: Namespace,
    metric: MetricKind,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if labels.len() != table.vectors.len() {
        return Err(Error::DimensionMismatch {
            expected: table.vectors.len(),
            got: labels.len(),
        });
    }
    let split = stratified_split(labels, settings.test_fraction, settings.seed)?;
    let descriptor = table.descriptor();
    let (learned, training) = match metric {
        MetricKind::Euclidean => (None, None),
        MetricKind::Lmnn => {
            let rows: Vec<Vec<f64>> = split.train.iter().map(|&i| table.vectors[i].values.clone()).collect();
            let names: Vec<String> = split.train.iter().map(|&i| labels[i].clone()).collect();
            let data = LabeledFeatures::from_named(&rows, &names)?.with_namespace(namespace);
            let outcome = train_lmnn(&data, descriptor.clone(), &settings.lmnn)?;
            let summary = outcome.summary(&settings.lmnn, Some(namespace));
            (Some(outcome.metric), Some(summary))
        }
    };
    let scores = score_retrieval(&table.vectors, labels, &split, learned, settings.k)?;
    Ok(EvalReport {
        feature: table.spec.name(),
        feature_descriptor: descriptor,
        averaging_scale: table.spec.averaging_scale(),
        metric,
        namespace,
        k: settings.k,
        p_at_k: scores.p_at_k,
        per_class: scores.per_class,
        co_retrieval: scores.co_retrieval,
        seed: settings.seed,
        n_train: split.train.len(),
        n_test: split.test.len(),
        training,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub k: usize,
    pub test_fraction: f64,
    pub seed: u64,
    pub lmnn: LmnnConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            k: DEFAULT_K,
            test_fraction: DEFAULT_TEST_FRACTION,
            seed: DEFAULT_SEED,
            lmnn: LmnnConfig::default(),
        }
    }
}

/// Feature families of the grid; scattering is expanded over the T sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridFeature {
    Mfcc13,
    Mfcc40,
    MfccPoly,
    Scattering,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub features: Vec<GridFeature>,
    /// Averaging scales T in seconds, used by scattering only.
    pub scales: Vec<f64>,
    pub metrics: Vec<MetricKind>,
    pub namespaces: Vec<Namespace>,
    pub settings: EvalSettings,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            features: vec![
                GridFeature::Mfcc13,
                GridFeature::Mfcc40,
                GridFeature::MfccPoly,
                GridFeature::Scattering,
            ],
            scales: vec![0.025, 0.1, 0.25, 0.5, 1.0],
            metrics: vec![MetricKind::Euclidean, MetricKind::Lmnn],
            namespaces: vec![Namespace::Instrument, Namespace::Technique],
            settings: EvalSettings::default(),
        }
    }
}

impl GridSpec {
    /// Concrete feature specs, in grid order.
    pub fn feature_specs(&self) -> Vec<FeatureSpec> {
        let mut out = Vec::new();
        for f in &self.features {
            match f {
                GridFeature::Mfcc13 => out.push(FeatureSpec::mfcc(13)),
                GridFeature::Mfcc40 => out.push(FeatureSpec::mfcc(40)),
                GridFeature::MfccPoly => out.push(FeatureSpec::mfcc_poly()),
                GridFeature::Scattering => {
                    out.extend(self.scales.iter().map(|&t| FeatureSpec::scattering(t)))
                }
            }
        }
        out
    }
}

/// Runs every cell of the grid over a labeled corpus.
pub fn run_grid(waves: &[Waveform], metadata: &[NoteMetadata], grid: &GridSpec) -> Result<Vec<EvalReport>> {
    if waves.len() != metadata.len() {
        return Err(Error::DimensionMismatch {
            expected: waves.len(),
            got: metadata.len(),
        });
    }
    let labels: BTreeMap<Namespace, Vec<String>> = grid
        .namespaces
        .iter()
        .map(|&ns| (ns, metadata.iter().map(|m| m.label(ns)).collect()))
        .collect();
    let mut reports = Vec::new();
    for spec in grid.feature_specs() {
        log::info!("extracting {}", spec.name());
        let table = FeatureTable::extract(&spec, waves)?;
        let cells: Vec<(Namespace, MetricKind)> = grid
            .namespaces
            .iter()
            .flat_map(|&ns| grid.metrics.iter().map(move |&m| (ns, m)))
            .collect();
        let done: Vec<EvalReport> = cells
            .par_iter()
            .map(|&(ns, m)| evaluate_cell(&table, &labels[&ns], ns, m, &grid.settings))
            .collect::<Result<_>>()?;
        reports.extend(done);
    }
    Ok(reports)
}

/// One JSON object per line.
pub fn write_reports_jsonl(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut out = Vec::new();
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let tmp = path.with_extension("jsonl.tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// `feature,T,metric,namespace,k,p_at_k` with one row per report.
pub fn summary_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("feature,T,metric,namespace,k,p_at_k\n");
    for r in reports {
        let t = r.averaging_scale.map(|t| t.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{:.4}\n",
            r.feature, t, r.metric, r.namespace, r.k, r.p_at_k
        ));
    }
    out
}
