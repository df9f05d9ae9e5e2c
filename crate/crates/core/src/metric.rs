//! Large-margin nearest-neighbor metric learning.
//!
//! The learned distance is `D(a, b) = |L (a - b)|` with a square `L`. Training
//! minimizes `(1 - mu) * sum_targets D^2(i, j) + mu * sum hinge(margin + D^2(i, j) - D^2(i, l))`
//! over target pairs `(i, j)` and differently labeled `l`, by gradient descent on `L`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Namespace;
use crate::error::{Error, Result};
use crate::features::{FeatureDescriptor, FeatureVector};

/// The linear map `L`, rows are output dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMatrix {
    pub entries: DMatrix<f64>,
    pub descriptor: FeatureDescriptor,
}

impl MetricMatrix {
    pub fn identity(dim: usize, descriptor: FeatureDescriptor) -> Self {
        MetricMatrix {
            entries: DMatrix::identity(dim, dim),
            descriptor,
        }
    }

    pub fn new(entries: DMatrix<f64>, descriptor: FeatureDescriptor) -> Result<Self> {
        if entries.nrows() > entries.ncols() {
            return Err(Error::InvalidConfig(format!(
                "metric maps {} dims to {}; output may not exceed input",
                entries.ncols(),
                entries.nrows()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("metric has non-finite entries".into()));
        }
        Ok(MetricMatrix { entries, descriptor })
    }

    pub fn input_dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_identity(&self) -> bool {
        self.entries.is_square()
            && self
                .entries
                .row_iter()
                .enumerate()
                .all(|(i, r)| r.iter().enumerate().all(|(j, &v)| v == if i == j { 1.0 } else { 0.0 }))
    }

    /// `L x`. Identity maps return `x` unchanged, bit for bit.
    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if self.is_identity() {
            return Ok(x.to_vec());
        }
        Ok(self.apply(x))
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.entries * nalgebra::DVector::from_column_slice(x))
            .iter()
            .copied()
            .collect()
    }

    /// `L x` for many rows, checking for the identity once.
    pub fn transform_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if let Some(r) = rows.iter().find(|r| r.len() != self.input_dim()) {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: r.len(),
            });
        }
        if self.is_identity() {
            return Ok(rows.to_vec());
        }
        Ok(rows.par_iter().map(|r| self.apply(r)).collect())
    }

    /// Writes a one-line JSON header followed by the matrix as little-endian
    /// row-major `f32`.
    pub fn save(&self, path: &Path, training: Option<&TrainingSummary>) -> Result<()> {
        let header = MetricHeader {
            rows: self.output_dim(),
            cols: self.input_dim(),
            descriptor: self.descriptor.clone(),
            training: training.cloned(),
        };
        let mut bytes = serde_json::to_vec(&header)?;
        bytes.push(b'\n');
        for r in 0..header.rows {
            for c in 0..header.cols {
                bytes.extend_from_slice(&(self.entries[(r, c)] as f32).to_le_bytes());
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, MetricHeader)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let malformed = |reason: &str| Error::MalformedArchive {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| malformed("missing header line"))?;
        let header: MetricHeader = serde_json::from_slice(&bytes[..newline])?;
        let body = &bytes[newline + 1..];
        if body.len() != header.rows * header.cols * 4 {
            return Err(malformed("matrix body has the wrong length"));
        }
        let values: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let entries = DMatrix::from_row_slice(header.rows, header.cols, &values);
        Ok((MetricMatrix::new(entries, header.descriptor.clone())?, header))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricHeader {
    pub rows: usize,
    pub cols: usize,
    pub descriptor: FeatureDescriptor,
    pub training: Option<TrainingSummary>,
}

/// What a trained metric remembers about how it was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub config: LmnnConfig,
    pub namespace: Option<Namespace>,
    pub final_loss: f64,
    pub iterations: usize,
}

/// `|L (a - b)|`.
pub fn distance(metric: &MetricMatrix, a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    metric.descriptor.ensure_matches(&a.descriptor)?;
    metric.descriptor.ensure_matches(&b.descriptor)?;
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let diff: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
    Ok(metric
        .transform(&diff)?
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmnnConfig {
    pub n_target_neighbors: usize,
    /// Weight of the push (impostor) term, in (0, 1).
    pub pull_push_weight: f64,
    pub margin: f64,
    pub max_iterations: usize,
    /// First step moves `L` by this fraction of its Frobenius norm.
    pub initial_step: f64,
    pub step_shrink: f64,
    pub step_grow: f64,
    /// Stop when an accepted step improves the loss by less than this fraction.
    pub convergence_tol: f64,
}

impl Default for LmnnConfig {
    fn default() -> Self {
        LmnnConfig {
            n_target_neighbors: 3,
            pull_push_weight: 0.5,
            margin: 1.0,
            max_iterations: 1000,
            initial_step: 0.01,
            step_shrink: 0.5,
            step_grow: 1.05,
            convergence_tol: 1e-7,
        }
    }
}

impl LmnnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.n_target_neighbors == 0 {
            return bad("need at least one target neighbor");
        }
        if !(self.pull_push_weight > 0.0 && self.pull_push_weight < 1.0) {
            return bad("pull/push weight must lie in (0, 1)");
        }
        if !(self.margin > 0.0) {
            return bad("margin must be positive");
        }
        if !(self.initial_step > 0.0) {
            return bad("initial step must be positive");
        }
        if !(self.step_shrink > 0.0 && self.step_shrink < 1.0) {
            return bad("step shrink must lie in (0, 1)");
        }
        if !(self.step_grow >= 1.0) {
            return bad("step growth must be at least 1");
        }
        if !(self.convergence_tol >= 0.0) {
            return bad("convergence tolerance must be non-negative");
        }
        Ok(())
    }
}

/// Row vectors with one class id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub vectors: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub namespace: Option<Namespace>,
}

impl LabeledFeatures {
    pub fn new(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("no training vectors".into()));
        }
        if rows.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                got: labels.len(),
            });
        }
        let d = rows[0].len();
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: r.len(),
            });
        }
        Ok(LabeledFeatures {
            vectors: DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]),
            labels,
            namespace: None,
        })
    }

    /// Maps string labels to dense ids in sorted label order.
    pub fn from_named(rows: &[Vec<f64>], labels: &[String]) -> Result<Self> {
        let mut names: Vec<&String> = labels.iter().collect();
        names.sort();
        names.dedup();
        let ids = labels
            .iter()
            .map(|l| names.binary_search(&l).expect("label present"))
            .collect();
        Self::new(rows, ids)
    }

    pub fn with_namespace(mut self, namespace: Namespace) -> Self {
        self.namespace = Some(namespace);
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

fn squared_euclidean(x: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    x.row(i)
        .iter()
        .zip(x.row(j).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// For every point, its `k` nearest same-class points under plain Euclidean
/// distance, ties to the lower index. Pairs are `(i, j)` in order of `i`, then rank.
pub fn target_neighbors(data: &LabeledFeatures, k: usize) -> Vec<(usize, usize)> {
    let n = data.len();
    (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut same: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i && data.labels[j] == data.labels[i])
                .map(|j| (squared_euclidean(&data.vectors, i, j), j))
                .collect();
            same.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            same.into_iter().take(k).map(move |(_, j)| (i, j))
        })
        .collect()
}

/// Pairwise squared distances of the rows of `z`.
fn squared_distances(z: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = z * z.transpose();
    let n = z.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            (gram[(i, i)] + gram[(j, j)] - 2.0 * gram[(i, j)]).max(0.0)
        }
    })
}

/// Loss and its gradient with respect to `L`.
pub fn lmnn_loss_grad(
    l: &DMatrix<f64>,
    data: &LabeledFeatures,
    targets: &[(usize, usize)],
    cfg: &LmnnConfig,
) -> Result<(f64, DMatrix<f64>)> {
    if l.ncols() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            got: l.ncols(),
        });
    }
    let n = data.len();
    let x = &data.vectors;
    let z = x * l.transpose();
    let dist = squared_distances(&z);
    let mu = cfg.pull_push_weight;

    let mut by_point: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(i, j) in targets {
        by_point[i].push(j);
    }
    // Pair weights w[i][m]: the loss is sum_{i,m} w[i][m] * D^2(i, m) plus constants.
    let mut weights = vec![0.0; n * n];
    let loss: f64 = weights
        .par_chunks_mut(n)
        .enumerate()
        .map(|(i, row)| {
            let mut loss = 0.0;
            for &j in &by_point[i] {
                let dij = dist[(i, j)];
                loss += (1.0 - mu) * dij;
                row[j] += 1.0 - mu;
                for l_idx in 0..n {
                    if data.labels[l_idx] == data.labels[i] {
                        continue;
                    }
                    let slack = cfg.margin + dij - dist[(i, l_idx)];
                    if slack > 0.0 {
                        loss += mu * slack;
                        row[j] += mu;
                        row[l_idx] -= mu;
                    }
                }
            }
            loss
        })
        .sum();

    // sum w_im (x_i - x_m)(x_i - x_m)^T = X^T C X with C the Laplacian of W + W^T.
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        for m in 0..n {
            let w = weights[i * n + m];
            if w != 0.0 {
                c[(i, i)] += w;
                c[(m, m)] += w;
                c[(i, m)] -= w;
                c[(m, i)] -= w;
            }
        }
    }
    let grad = (z.transpose() * (c * x)) * 2.0;
    Ok((loss, grad))
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct LmnnOutcome {
    pub metric: MetricMatrix,
    /// Loss at the identity, then after every accepted step.
    pub loss_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl LmnnOutcome {
    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().expect("history holds the initial loss")
    }

    pub fn summary(&self, cfg: &LmnnConfig, namespace: Option<Namespace>) -> TrainingSummary {
        TrainingSummary {
            config: *cfg,
            namespace,
            final_loss: self.final_loss(),
            iterations: self.iterations,
        }
    }
}

/// Gradient descent from the identity with step halving on increase and mild
/// growth on acceptance. Returns the lowest-loss iterate.
pub fn train_lmnn(
    data: &LabeledFeatures,
    descriptor: FeatureDescriptor,
    cfg: &LmnnConfig,
) -> Result<LmnnOutcome> {
    cfg.validate()?;
    let targets = target_neighbors(data, cfg.n_target_neighbors);
    if targets.is_empty() {
        return Err(Error::NoPullTerms);
    }
    let d = data.dim();
    let mut l = DMatrix::identity(d, d);
    let (mut loss, mut grad) = lmnn_loss_grad(&l, data, &targets, cfg)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(0));
    }
    let mut history = vec![loss];
    let grad_norm = grad.norm();
    let mut step = if grad_norm > 0.0 {
        cfg.initial_step * l.norm() / grad_norm
    } else {
        0.0
    };
    let mut converged = grad_norm == 0.0;
    let mut iterations = 0;
    while !converged && iterations < cfg.max_iterations {
        iterations += 1;
        let candidate = &l - &grad * step;
        let (new_loss, new_grad) = lmnn_loss_grad(&candidate, data, &targets, cfg)?;
        if !new_loss.is_finite() {
            return Err(Error::NonFiniteLoss(iterations));
        }
        if new_loss <= loss {
            let improvement = loss - new_loss;
            l = candidate;
            grad = new_grad;
            converged = improvement <= cfg.convergence_tol * loss.abs() || new_loss == 0.0;
            loss = new_loss;
            history.push(loss);
            step *= cfg.step_grow;
        } else {
            step *= cfg.step_shrink;
            if step * grad.norm() <= f64::EPSILON * l.norm() {
                converged = true;
            }
        }
    }
    log::debug!("lmnn: {iterations} iterations, loss {} -> {loss}", history[0]);
    Ok(LmnnOutcome {
        metric: MetricMatrix::new(l, descriptor)?,
        loss_history: history,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureSpec;

    fn desc() -> FeatureDescriptor {
        FeatureSpec::mfcc(2).descriptor()
    }

    fn fv(values: &[f64]) -> FeatureVector {
        FeatureVector::new(values.to_vec(), desc()).unwrap()
    }

    #[test]
    fn distance_examples() {
        let id = MetricMatrix::identity(2, desc());
        assert_eq!(distance(&id, &fv(&[0.0, 0.0]), &fv(&[3.0, 4.0])).unwrap(), 5.0);
        assert_eq!(distance(&id, &fv(&[1.5, 2.0]), &fv(&[1.5, 2.0])).unwrap(), 0.0);
        let diag = MetricMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]), desc()).unwrap();
        assert_eq!(distance(&diag, &fv(&[1.0, 1.0]), &fv(&[0.0, 0.0])).unwrap(), 2.0);
        assert!(distance(&id, &fv(&[1.0]), &fv(&[1.0])).is_err());
        let other = FeatureVector::new(vec![0.0, 0.0], FeatureSpec::mfcc(13).descriptor()).unwrap();
        assert!(distance(&id, &other, &other).is_err());
    }

    #[test]
    fn colinear_targets() {
        let data = LabeledFeatures::new(&[vec![0.0], vec![1.0], vec![10.0]], vec![0, 0, 0]).unwrap();
        assert_eq!(target_neighbors(&data, 1), vec![(0, 1), (1, 0), (2, 1)]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let data = LabeledFeatures::new(&[vec![0.0], vec![-1.0], vec![1.0]], vec![0, 0, 0]).unwrap();
        assert_eq!(target_neighbors(&data, 1)[0], (0, 1));
    }

    #[test]
    fn singleton_classes_have_no_pull_terms() {
        let data = LabeledFeatures::new(&[vec![0.0], vec![1.0]], vec![0, 1]).unwrap();
        assert!(target_neighbors(&data, 1).is_empty());
        assert!(matches!(
            train_lmnn(&data, desc(), &LmnnConfig::default()),
            Err(Error::NoPullTerms)
        ));
    }

    #[test]
    fn zero_map_activates_every_triple() {
        let rows = vec![vec![0.0, 1.0], vec![0.5, 1.0], vec![3.0, 0.0], vec![3.0, 0.2], vec![9.0, 9.0]];
        let data = LabeledFeatures::new(&rows, vec![0, 0, 1, 1, 1]).unwrap();
        let cfg = LmnnConfig::default();
        let targets = target_neighbors(&data, 1);
        let triples: usize = targets
            .iter()
            .map(|&(i, _)| data.labels.iter().filter(|&&c| c != data.labels[i]).count())
            .sum();
        let (loss, _) = lmnn_loss_grad(&DMatrix::zeros(2, 2), &data, &targets, &cfg).unwrap();
        assert!((loss - cfg.pull_push_weight * cfg.margin * triples as f64).abs() < 1e-12);
    }

    #[test]
    fn separated_coincident_classes_have_zero_loss() {
        let rows = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![10.0, 0.0], vec![10.0, 0.0]];
        let data = LabeledFeatures::new(&rows, vec![0, 0, 1, 1]).unwrap();
        let targets = target_neighbors(&data, 1);
        let (loss, grad) =
            lmnn_loss_grad(&DMatrix::identity(2, 2), &data, &targets, &LmnnConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn metric_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = MetricMatrix::new(DMatrix::from_row_slice(2, 3, &[1.0, 0.5, -2.0, 0.0, 0.25, 3.0]), desc())
            .unwrap();
        let summary = TrainingSummary {
            config: LmnnConfig::default(),
            namespace: Some(Namespace::Technique),
            final_loss: 1.5,
            iterations: 7,
        };
        m.save(&path, Some(&summary)).unwrap();
        let (back, header) = MetricMatrix::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(header.training, Some(summary));
        let text = fs::read(&path).unwrap();
        assert!(text.starts_with(b"{\"rows\":2,\"cols\":3"));
    }

    #[test]
    fn wide_maps_are_rejected() {
        assert!(MetricMatrix::new(DMatrix::zeros(3, 2), desc()).is_err());
    }
}
