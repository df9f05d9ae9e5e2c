//! Diffusion-map embedding of a feature space, plus the subset filters used to
//! pick what to embed.

use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Namespace, NoteMetadata};
use crate::dsp;
use crate::error::{Error, Result};
use crate::metric::MetricMatrix;

/// Kernel weights below this count as missing edges when checking connectivity.
pub const EDGE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionParams {
    pub n_dims: usize,
    /// Gaussian kernel width; `None` uses the median pairwise distance.
    pub bandwidth: Option<f64>,
    pub time: f64,
}

impl Default for DiffusionParams {
    fn default() -> Self {
        DiffusionParams {
            n_dims: 2,
            bandwidth: None,
            time: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    /// One row per input vector, `n_dims` columns.
    pub coordinates: Vec<Vec<f64>>,
    /// Non-trivial eigenvalues, non-increasing.
    pub eigenvalues: Vec<f64>,
    pub bandwidth: f64,
}

fn pairwise_distances(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.par_iter()
        .map(|a| {
            rows.iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                .collect()
        })
        .collect()
}

fn median_offdiagonal(dist: &[Vec<f64>]) -> f64 {
    let mut values: Vec<f64> = dist
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row[i + 1..].iter().copied())
        .collect();
    if values.is_empty() {
        return 0.0;
    }
    dsp::median(&mut values)
}

/// Kernel `exp(-D^2 / sigma^2)` over `rows` mapped through the metric.
fn kernel(rows: &[Vec<f64>], metric: Option<&MetricMatrix>, bandwidth: Option<f64>) -> Result<(DMatrix<f64>, f64)> {
    let mapped = match metric {
        Some(m) => m.transform_rows(rows)?,
        None => rows.to_vec(),
    };
    let dist = pairwise_distances(&mapped);
    let sigma = match bandwidth {
        Some(s) => s,
        None => median_offdiagonal(&dist),
    };
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "kernel bandwidth must be positive, got {sigma}"
        )));
    }
    let n = rows.len();
    let w = DMatrix::from_fn(n, n, |i, j| (-(dist[i][j] / sigma).powi(2)).exp());
    Ok((w, sigma))
}

fn components(w: &DMatrix<f64>) -> usize {
    let n = w.nrows();
    let mut seen = vec![false; n];
    let mut count = 0;
    for start in 0..n {
        if seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if !seen[j] && w[(i, j)] > EDGE_FLOOR {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    count
}

/// Row-normalized kernel `D^-1 W`, each row summing to one.
pub fn markov_matrix(rows: &[Vec<f64>], metric: Option<&MetricMatrix>, bandwidth: Option<f64>) -> Result<DMatrix<f64>> {
    let (mut w, _) = kernel(rows, metric, bandwidth)?;
    for mut row in w.row_iter_mut() {
        let s: f64 = row.sum();
        row /= s;
    }
    Ok(w)
}

/// Diffusion coordinates `lambda_k^t * psi_k` of the top non-trivial eigenpairs
/// of the Markov matrix. Each eigenvector is signed so its first nonzero entry
/// is positive.
pub fn diffusion_map(
    rows: &[Vec<f64>],
    metric: Option<&MetricMatrix>,
    params: &DiffusionParams,
) -> Result<Embedding> {
    let n = rows.len();
    if params.n_dims == 0 {
        return Err(Error::InvalidConfig("need at least one embedding dimension".into()));
    }
    if n < params.n_dims + 1 {
        return Err(Error::NotEnoughItems {
            requested: params.n_dims + 1,
            available: n,
        });
    }
    if !(params.time >= 0.0) {
        return Err(Error::InvalidConfig("diffusion time must be non-negative".into()));
    }
    let (w, sigma) = kernel(rows, metric, params.bandwidth)?;
    let parts = components(&w);
    if parts > 1 {
        return Err(Error::DisconnectedGraph {
            bandwidth: sigma,
            components: parts,
        });
    }
    let degree: Vec<f64> = w.row_iter().map(|r| r.sum()).collect();
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    // Symmetric conjugate of the Markov matrix: same eigenvalues.
    let sym = DMatrix::from_fn(n, n, |i, j| w[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 0)
        .ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    // Right eigenvectors of D^-1 W are D^-1/2 v; dividing by the trivial one
    // makes it constant 1.
    let trivial = eig.eigenvectors.column(order[0]);
    let mut coordinates = vec![Vec::with_capacity(params.n_dims); n];
    let mut eigenvalues = Vec::with_capacity(params.n_dims);
    for &k in &order[1..=params.n_dims] {
        let lambda = eig.eigenvalues[k].clamp(0.0, 1.0);
        let v = eig.eigenvectors.column(k);
        let mut psi: Vec<f64> = (0..n).map(|i| v[i] / trivial[i]).collect();
        if let Some(first) = psi.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                psi.iter_mut().for_each(|x| *x = -*x);
            }
        }
        let scale = lambda.powf(params.time);
        for (row, p) in coordinates.iter_mut().zip(&psi) {
            row.push(scale * p);
        }
        eigenvalues.push(lambda);
    }
    Ok(Embedding {
        coordinates,
        eigenvalues,
        bandwidth: sigma,
    })
}

/// One `namespace=value|value` clause.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clause {
    pub namespace: Namespace,
    pub values: Vec<String>,
}

/// Conjunction of clauses over note labels. The mute field is ignored by every
/// label namespace, so muted and unmuted notes of a class pass alike.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SubsetFilter {
    pub clauses: Vec<Clause>,
}

/// Violin against trumpet, ordinario only.
pub const VIOLIN_TRUMPET_ORDINARIO: &str = "violin-trumpet-ordinario";
/// Bowed strings, tremolo against ordinario.
pub const BOWED_TREMOLO_ORDINARIO: &str = "bowed-tremolo-ordinario";

impl SubsetFilter {
    pub fn all() -> Self {
        SubsetFilter::default()
    }

    pub fn matches(&self, meta: &NoteMetadata) -> bool {
        self.clauses
            .iter()
            .all(|c| c.values.iter().any(|v| *v == meta.label(c.namespace)))
    }

    /// Indices of the matching items.
    pub fn select(&self, items: &[NoteMetadata]) -> Vec<usize> {
        items
            .iter()
            .enumerate()
            .filter(|(_, m)| self.matches(m))
            .map(|(i, _)| i)
            .collect()
    }
}

impl FromStr for SubsetFilter {
    type Err = Error;

    /// A canned subset name, or clauses like `instrument=Vn|TpC;technique=ord`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "" | "all" => return Ok(SubsetFilter::all()),
            VIOLIN_TRUMPET_ORDINARIO => return "instrument=Vn|TpC;technique=ord".parse(),
            BOWED_TREMOLO_ORDINARIO => return "instrument=Vn|Va|Vc|Cb;technique=ord|trem".parse(),
            _ => {}
        }
        let clauses = s
            .split(';')
            .filter(|c| !c.trim().is_empty())
            .map(|clause| {
                let (ns, values) = clause
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidConfig(format!("filter clause {clause:?} lacks '='")))?;
                let namespace = ns
                    .trim()
                    .parse::<Namespace>()
                    .map_err(|_| Error::InvalidConfig(format!("unknown namespace {ns:?}")))?;
                Ok(Clause {
                    namespace,
                    values: values.split('|').map(|v| v.trim().to_string()).collect(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(SubsetFilter { clauses })
    }
}

/// One embedded item as exported to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPoint {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub label: String,
    pub instrument: String,
    pub technique: String,
}

/// Points for the first two diffusion coordinates; `ids` index `metadata`.
pub fn embedding_points(
    embedding: &Embedding,
    ids: &[usize],
    metadata: &[NoteMetadata],
    label_namespace: Namespace,
) -> Vec<EmbeddingPoint> {
    ids.iter()
        .zip(&embedding.coordinates)
        .map(|(&id, c)| {
            let m = &metadata[id];
            EmbeddingPoint {
                id,
                x: c[0],
                y: c.get(1).copied().unwrap_or(0.0),
                label: m.label(label_namespace),
                instrument: m.label(Namespace::Instrument),
                technique: m.label(Namespace::Technique),
            }
        })
        .collect()
}
